//! The full network: tokenizers feeding a stack of transformer blocks split
//! into an encoding stage and a decoding stage, with a gated geometric prior
//! injection between them and two output heads at the end.
//!
//! The injection is built to be an exact no-op at initialization: all three
//! gates and both feature convolutions start at zero, so a fresh model is
//! numerically identical to the plain encoder-decoder. The prior branches
//! still produce supervised outputs (body coefficients, point map) from step
//! one; only their influence on the main token stream is gated.

use crate::attention::{block_forward, init_block, init_linear, AttnLayout, BlockWeights};
use crate::body::ProxySkeleton;
use crate::camera::{plucker_map, tokenize_source, tokenize_target, CameraPose, PluckerMap};
use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::priors::{
    init_prior_params, point_head, pool_to_tokens, render_position_map, smplx_decoder,
    triplane_query, BodyTensors, PositionMap, TriBox, PRIOR_CH,
};
use crate::splat::GaussianSet;
use crate::tensor::{
    concat, read_checkpoint, write_checkpoint, ParamLeaves, ParamStore, Scalar, Tape, Tensor,
};
use rand::SeedableRng;
use std::path::Path;

/// Raw channels the gaussian head emits per pixel: depth, log-scale,
/// opacity, and three colors.
pub const GAUSS_RAW_CH: usize = 6;
const LOG_SIGMA_LO: f64 = -6.0;
const LOG_SIGMA_HI: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    /// Encoder depth (stage 1).
    pub m: usize,
    /// Decoder depth (stage 3).
    pub n: usize,
    /// Token dimension.
    pub d: usize,
    /// Patch size, pixels.
    pub p: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    /// Distillation group size; also the trace sampling stride.
    pub group: usize,
    /// Raw gaussian-head channels per pixel.
    pub gauss_ch: usize,
    /// Prior feature channels.
    pub prior_ch: usize,
}

impl Default for CascadeConfig {
    fn default() -> CascadeConfig {
        CascadeConfig {
            m: 12,
            n: 24,
            d: 32,
            p: 8,
            height: 64,
            width: 64,
            heads: 4,
            group: 6,
            gauss_ch: GAUSS_RAW_CH,
            prior_ch: PRIOR_CH,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        let total = self.m + self.n;
        if total == 0 || self.group == 0 || total % self.group != 0 {
            return Err(Error::Config(format!(
                "layer count {total} must be a positive multiple of group {}",
                self.group
            )));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "token dim {} not divisible by heads {}",
                self.d, self.heads
            )));
        }
        if self.p == 0 || self.height % self.p != 0 || self.width % self.p != 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} not divisible by patch {}",
                self.height, self.width, self.p
            )));
        }
        if self.gauss_ch != GAUSS_RAW_CH {
            return Err(Error::Config(format!(
                "gaussian head emits {GAUSS_RAW_CH} channels, config says {}",
                self.gauss_ch
            )));
        }
        if self.prior_ch != PRIOR_CH {
            return Err(Error::Config(format!(
                "prior branches are built for {PRIOR_CH} channels, config says {}",
                self.prior_ch
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.height / self.p
    }

    pub fn cols(&self) -> usize {
        self.width / self.p
    }

    /// Tokens per view.
    pub fn tokens_per_view(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Source + target sequence length.
    pub fn seq_len(&self) -> usize {
        2 * self.tokens_per_view()
    }

    /// Global layer indices whose post-block activations are traced:
    /// every `group`-th layer, counting from 1.
    pub fn trace_layers(&self) -> Vec<usize> {
        (0..self.m + self.n).filter(|i| (i + 1) % self.group == 0).collect()
    }

    fn encode_meta<E: Scalar>(&self) -> Vec<E> {
        [
            self.m, self.n, self.d, self.p, self.height, self.width, self.heads, self.group,
            self.gauss_ch, self.prior_ch,
        ]
        .iter()
        .map(|&v| E::from_f64(v as f64))
        .collect()
    }

    fn decode_meta<E: Scalar>(data: &[E]) -> Result<CascadeConfig> {
        if data.len() != 10 {
            return Err(Error::dims("config meta", &[data.len()], &[10]));
        }
        let v: Vec<usize> = data.iter().map(|&e| <E as Scalar>::to_f64(e) as usize).collect();
        Ok(CascadeConfig {
            m: v[0],
            n: v[1],
            d: v[2],
            p: v[3],
            height: v[4],
            width: v[5],
            heads: v[6],
            group: v[7],
            gauss_ch: v[8],
            prior_ch: v[9],
        })
    }
}

/// Everything a run owns: architecture, per-layer kernel choice, parameters.
#[derive(Debug, Clone)]
pub struct ModelState<E: Scalar> {
    pub config: CascadeConfig,
    pub layout: AttnLayout,
    pub params: ParamStore<E>,
}

impl<E: Scalar> ModelState<E> {
    /// Fresh model: every attention layer full, injection exactly zero,
    /// output heads and block weights Glorot.
    pub fn init(config: CascadeConfig, seed: u64) -> Result<ModelState<E>> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, p) = (config.d, config.p);

        init_linear(&mut params, "embed.source", 9 * p * p, d, &mut rng);
        init_linear(&mut params, "embed.target", 6 * p * p, d, &mut rng);
        for i in 0..config.m {
            init_block(&mut params, &format!("stage1.block{i}"), d, &mut rng);
        }
        for i in 0..config.n {
            init_block(&mut params, &format!("stage3.block{i}"), d, &mut rng);
        }
        init_prior_params(&mut params, d, p, &mut rng);

        for gate in ["res", "smpl", "pts"] {
            params.insert(&format!("inject.gamma_{gate}"), &[1], vec![E::zero()]);
        }
        for conv in ["smpl", "pts"] {
            params.insert(
                &format!("inject.conv_{conv}.w"),
                &[d, config.prior_ch, 1, 1],
                vec![E::zero(); d * config.prior_ch],
            );
            params.insert(&format!("inject.conv_{conv}.b"), &[d], vec![E::zero(); d]);
        }
        init_linear(&mut params, "head.nvs", d, 3 * p * p, &mut rng);
        init_linear(&mut params, "head.gs", d, GAUSS_RAW_CH * p * p, &mut rng);

        Ok(ModelState {
            layout: AttnLayout::all_full(config.m + config.n),
            config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = self.params.clone();
        store.insert("meta.config", &[10], self.config.encode_meta::<E>());
        let tags: Vec<E> = self.layout.to_tags().iter().map(|&t| E::from_f64(t as f64)).collect();
        store.insert("meta.attn_layout", &[tags.len()], tags);
        write_checkpoint(&store, path)
    }

    pub fn load(path: &Path) -> Result<ModelState<E>> {
        let mut store: ParamStore<E> = read_checkpoint(path)?;
        let meta = store
            .remove("meta.config")
            .ok_or_else(|| Error::Contract(format!("{}: missing meta.config", path.display())))?;
        let config = CascadeConfig::decode_meta(&meta.data)?;
        let tags = store
            .remove("meta.attn_layout")
            .ok_or_else(|| Error::Contract(format!("{}: missing meta.attn_layout", path.display())))?;
        let tags_f32: Vec<f32> = tags.data.iter().map(|&e| <E as Scalar>::to_f64(e) as f32).collect();
        let layout = AttnLayout::from_tags(&tags_f32)?;
        config.validate()?;
        if layout.0.len() != config.m + config.n {
            return Err(Error::Config(format!(
                "layout length {} does not match {} layers",
                layout.0.len(),
                config.m + config.n
            )));
        }
        Ok(ModelState { config, layout, params: store })
    }
}

fn check_layout(layout: &AttnLayout, need: usize) -> Result<()> {
    if layout.0.len() < need {
        return Err(Error::Config(format!(
            "attention layout has {} entries, need {need}",
            layout.0.len()
        )));
    }
    Ok(())
}

/// Run a contiguous run of blocks. `start` is the global index of the first
/// one; post-block activations are appended to `trace` at the sampled layers.
fn run_blocks<E: Scalar>(
    mut t: Tensor<E>,
    leaves: &ParamLeaves<E>,
    stage: &str,
    start: usize,
    count: usize,
    cfg: &CascadeConfig,
    layout: &AttnLayout,
    mut trace: Option<&mut Vec<(usize, Tensor<E>)>>,
) -> Result<Tensor<E>> {
    check_layout(layout, start + count)?;
    for i in 0..count {
        let global = start + i;
        let w = BlockWeights::fetch(leaves, &format!("{stage}.block{i}"))?;
        t = block_forward(&t, &w, cfg.heads, layout.0[global])?;
        if let Some(tr) = trace.as_deref_mut() {
            if (global + 1) % cfg.group == 0 {
                tr.push((global, t.clone()));
            }
        }
    }
    Ok(t)
}

/// Stage 1: blocks `0..M` over the concatenated source+target sequence.
pub fn encode_stage1<E: Scalar>(
    t_in: &Tensor<E>,
    leaves: &ParamLeaves<E>,
    cfg: &CascadeConfig,
    layout: &AttnLayout,
) -> Result<Tensor<E>> {
    run_blocks(t_in.clone(), leaves, "stage1", 0, cfg.m, cfg, layout, None)
}

/// Stage 3: blocks `M..M+N`.
pub fn decode_stage3<E: Scalar>(
    t: &Tensor<E>,
    leaves: &ParamLeaves<E>,
    cfg: &CascadeConfig,
    layout: &AttnLayout,
) -> Result<Tensor<E>> {
    run_blocks(t.clone(), leaves, "stage3", cfg.m, cfg.n, cfg, layout, None)
}

/// Zero-pad target-grid features over the source half and flatten to token
/// order after a 1x1 convolution: `[S, C]` -> `[2S, d]`.
fn conv_and_flatten<E: Scalar>(
    feat: &Tensor<E>,
    conv_w: &Tensor<E>,
    conv_b: &Tensor<E>,
    cfg: &CascadeConfig,
) -> Result<Tensor<E>> {
    let (rows, cols) = (cfg.rows(), cfg.cols());
    let s = cfg.tokens_per_view();
    let fs = feat.shape();
    if fs != vec![s, cfg.prior_ch] {
        return Err(Error::dims("inject_priors", &fs, &[s, cfg.prior_ch]));
    }
    let grid = feat.transpose()?.reshape(&[cfg.prior_ch, rows, cols])?;
    let pad = feat.tape().zeros(&[cfg.prior_ch, rows, cols]);
    let full = concat(&[pad, grid], 1)?;
    let mixed = full.conv2d(conv_w, conv_b)?;
    mixed.reshape(&[cfg.d, 2 * s])?.transpose()
}

/// Gated long-skip injection:
/// `T' = T_mid + g_smpl conv(F_smpl) + g_pts conv(F_pts) + g_res T_in`.
pub fn inject_priors<E: Scalar>(
    t_mid: &Tensor<E>,
    t_in: &Tensor<E>,
    f_smpl: &Tensor<E>,
    f_pts: &Tensor<E>,
    leaves: &ParamLeaves<E>,
    cfg: &CascadeConfig,
) -> Result<Tensor<E>> {
    let seq = vec![cfg.seq_len(), cfg.d];
    if t_mid.shape() != seq || t_in.shape() != seq {
        return Err(Error::dims("inject_priors", &t_mid.shape(), &seq));
    }
    let smpl = conv_and_flatten(f_smpl, &leaves.get("inject.conv_smpl.w")?, &leaves.get("inject.conv_smpl.b")?, cfg)?
        .mul_scalar_t(&leaves.get("inject.gamma_smpl")?)?;
    let pts = conv_and_flatten(f_pts, &leaves.get("inject.conv_pts.w")?, &leaves.get("inject.conv_pts.b")?, cfg)?
        .mul_scalar_t(&leaves.get("inject.gamma_pts")?)?;
    let res = t_in.mul_scalar_t(&leaves.get("inject.gamma_res")?)?;
    t_mid.add(&smpl)?.add(&pts)?.add(&res)
}

/// Image head: target tokens to an RGB image in (0, 1).
pub fn nvs_head<E: Scalar>(
    t_target: &Tensor<E>,
    leaves: &ParamLeaves<E>,
    cfg: &CascadeConfig,
) -> Result<Tensor<E>> {
    t_target
        .linear(&leaves.get("head.nvs.w")?, &leaves.get("head.nvs.b")?)?
        .sigmoid()
        .unpatchify(cfg.p, cfg.rows(), cfg.cols(), 3)
}

/// Gaussian head: target tokens to one isotropic gaussian per target pixel,
/// positioned along that pixel's camera ray.
pub fn gaussian_head<E: Scalar>(
    t_target: &Tensor<E>,
    leaves: &ParamLeaves<E>,
    cfg: &CascadeConfig,
    pose: &CameraPose,
    rays: &PluckerMap,
) -> Result<GaussianSet<E>> {
    let raw = t_target
        .linear(&leaves.get("head.gs.w")?, &leaves.get("head.gs.b")?)?
        .unpatchify(cfg.p, cfg.rows(), cfg.cols(), GAUSS_RAW_CH)?;
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let depth = raw.slice(0, 0, 1)?.softplus();
    let log_sigma = raw
        .slice(0, 1, 1)?
        .sigmoid()
        .scale(LOG_SIGMA_HI - LOG_SIGMA_LO)
        .add_scalar(LOG_SIGMA_LO);
    let alpha = raw.slice(0, 2, 1)?.sigmoid().reshape(&[hw])?;
    let color = raw.slice(0, 3, 3)?.sigmoid().reshape(&[3, hw])?.transpose()?;

    let origin = pose.camera_center();
    let tape = t_target.tape();
    let mut dirs = vec![E::zero(); 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let d = rays.dir(x, y);
            dirs[y * w + x] = E::from_f64(d.x);
            dirs[hw + y * w + x] = E::from_f64(d.y);
            dirs[2 * hw + y * w + x] = E::from_f64(d.z);
        }
    }
    let dir_t = tape.constant(dirs, &[3, h, w])?;
    let mut means = Vec::with_capacity(3);
    for (c, oc) in [origin.x, origin.y, origin.z].iter().enumerate() {
        let m = depth.mul(&dir_t.slice(0, c, 1)?)?.add_scalar(*oc);
        means.push(m.reshape(&[1, hw])?);
    }
    let means = concat(&means, 0)?.transpose()?;
    Ok(GaussianSet {
        means,
        sigma: log_sigma.exp().reshape(&[hw])?,
        alpha,
        color,
    })
}

/// One source view plus the pose to synthesize.
pub struct ForwardInput<'a> {
    pub image: &'a Image,
    pub source_pose: &'a CameraPose,
    pub target_pose: &'a CameraPose,
}

/// Everything the losses and the renderers need from one pass.
pub struct CascadeOutput<E: Scalar> {
    /// `[3, H, W]`, in (0, 1).
    pub image: Tensor<E>,
    pub gaussians: GaussianSet<E>,
    pub body: BodyTensors<E>,
    pub body_params: crate::body::BodyParams,
    /// `[3, H, W]` camera-frame point map.
    pub point_x: Tensor<E>,
    /// `[1, H, W]` confidence, strictly positive.
    pub point_c: Tensor<E>,
    pub position_map: PositionMap,
    pub t_mid: Tensor<E>,
    pub t_mid_prime: Tensor<E>,
    /// Post-block activations at the sampled global layers, in order.
    pub trace: Vec<(usize, Tensor<E>)>,
}

fn check_pose(pose: &CameraPose, cfg: &CascadeConfig, what: &str) -> Result<()> {
    pose.validate()?;
    if pose.height != cfg.height || pose.width != cfg.width {
        return Err(Error::Config(format!(
            "{what} pose is {}x{}, model expects {}x{}",
            pose.height, pose.width, cfg.height, cfg.width
        )));
    }
    Ok(())
}

fn tokenize_pair<E: Scalar>(
    tape: &Tape<E>,
    leaves: &ParamLeaves<E>,
    cfg: &CascadeConfig,
    input: &ForwardInput,
    tgt_rays: &PluckerMap,
) -> Result<Tensor<E>> {
    let src_rays = plucker_map(input.source_pose)?;
    let src = tokenize_source(
        tape,
        &input.image.data,
        &src_rays,
        cfg.p,
        &leaves.get("embed.source.w")?,
        &leaves.get("embed.source.b")?,
    )?;
    let tgt = tokenize_target(
        tape,
        tgt_rays,
        cfg.p,
        &leaves.get("embed.target.w")?,
        &leaves.get("embed.target.b")?,
    )?;
    concat(&[src.tokens, tgt.tokens], 0)
}

/// Full pipeline. The body's vertex scaffold and position map are computed
/// as plain data: gradients reach the body heads through the parameter loss
/// and the triplanes through the feature lookup, not through rasterization.
pub fn forward<E: Scalar>(
    tape: &Tape<E>,
    leaves: &ParamLeaves<E>,
    cfg: &CascadeConfig,
    layout: &AttnLayout,
    skeleton: &ProxySkeleton,
    input: &ForwardInput,
) -> Result<CascadeOutput<E>> {
    cfg.validate()?;
    check_layout(layout, cfg.m + cfg.n)?;
    check_pose(input.source_pose, cfg, "source")?;
    check_pose(input.target_pose, cfg, "target")?;
    if input.image.channels != 3 || input.image.h != cfg.height || input.image.w != cfg.width {
        return Err(Error::dims(
            "forward",
            &[input.image.channels, input.image.h, input.image.w],
            &[3, cfg.height, cfg.width],
        ));
    }
    let (rows, cols, s) = (cfg.rows(), cfg.cols(), cfg.tokens_per_view());
    let tgt_rays = plucker_map(input.target_pose)?;
    let t_in = tokenize_pair(tape, leaves, cfg, input, &tgt_rays)?;

    let mut trace = Vec::new();
    let t_mid = run_blocks(t_in.clone(), leaves, "stage1", 0, cfg.m, cfg, layout, Some(&mut trace))?;

    let src_half = t_mid.slice(0, 0, s)?;
    let tgt_half = t_mid.slice(0, s, s)?;
    let body = smplx_decoder(&src_half, rows, cols, leaves)?;
    let body_params = body.to_params()?;
    let vertices = skeleton.surface_vertices(&body_params)?;
    let position_map = render_position_map(&vertices, input.target_pose)?;
    let planes = [
        leaves.get("prior.triplane.xy")?,
        leaves.get("prior.triplane.xz")?,
        leaves.get("prior.triplane.yz")?,
    ];
    let f_img = triplane_query(&planes, &position_map, &TriBox::default())?;
    let f_smpl = pool_to_tokens(&f_img, cfg.p)?;
    let (point_x, point_c, f_pts) = point_head(&tgt_half, rows, cols, cfg.p, leaves)?;

    let t_mid_prime = inject_priors(&t_mid, &t_in, &f_smpl, &f_pts, leaves, cfg)?;
    let t_out = run_blocks(
        t_mid_prime.clone(),
        leaves,
        "stage3",
        cfg.m,
        cfg.n,
        cfg,
        layout,
        Some(&mut trace),
    )?;
    let t_target = t_out.slice(0, s, s)?;
    let image = nvs_head(&t_target, leaves, cfg)?;
    let gaussians = gaussian_head(&t_target, leaves, cfg, input.target_pose, &tgt_rays)?;

    Ok(CascadeOutput {
        image,
        gaussians,
        body,
        body_params,
        point_x,
        point_c,
        position_map,
        t_mid,
        t_mid_prime,
        trace,
    })
}

/// The same pipeline with the whole prior stage ablated: decode straight
/// from the encoder output. Reference point for the zero-init identity.
pub fn forward_baseline<E: Scalar>(
    tape: &Tape<E>,
    leaves: &ParamLeaves<E>,
    cfg: &CascadeConfig,
    layout: &AttnLayout,
    input: &ForwardInput,
) -> Result<Tensor<E>> {
    cfg.validate()?;
    check_pose(input.source_pose, cfg, "source")?;
    check_pose(input.target_pose, cfg, "target")?;
    let tgt_rays = plucker_map(input.target_pose)?;
    let t_in = tokenize_pair(tape, leaves, cfg, input, &tgt_rays)?;
    let t_mid = run_blocks(t_in, leaves, "stage1", 0, cfg.m, cfg, layout, None)?;
    let t_out = run_blocks(t_mid, leaves, "stage3", cfg.m, cfg.n, cfg, layout, None)?;
    let s = cfg.tokens_per_view();
    nvs_head(&t_out.slice(0, s, s)?, leaves, cfg)
}
