//! Training loops: cosine-annealed teacher training with decoupled
//! backbone/head rates, fixed-rate progressive distillation driven by the
//! stitch schedule, and no-grad evaluation.

use crate::body::ProxySkeleton;
use crate::cascade::{forward, CascadeOutput, ForwardInput, ModelState};
use crate::config::RunConfig;
use crate::dataset::{DatasetIndex, Pair, Sample};
use crate::distill::StitchSchedule;
use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::loss::{
    loss_distill, loss_gs, loss_nvs, loss_pts, loss_smplx, loss_total, LossReport, LossTerms,
};
use crate::metrics::{psnr, ssim, MetricReport};
use crate::splat::splat_render;
use crate::tensor::{backward, concat, AdamW, LrSchedule, ParamLeaves, Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Newly initialized parameters train at the head rate; everything else is
/// treated as backbone.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.") || name.starts_with("prior.") || name.starts_with("inject.")
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub last_report: Option<LossReport>,
}

pub struct DistillArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub audit: PathBuf,
    pub last_report: Option<LossReport>,
}

fn const_image<E: Scalar>(tape: &Tape<E>, img: &Image) -> Result<Tensor<E>> {
    tape.constant(
        img.data.iter().map(|&v| E::from_f64(v as f64)).collect(),
        &[img.channels, img.h, img.w],
    )
}

fn const_plane<E: Scalar>(tape: &Tape<E>, data: &[f32], shape: &[usize]) -> Result<Tensor<E>> {
    tape.constant(data.iter().map(|&v| E::from_f64(v as f64)).collect(), shape)
}

fn mean_of<E: Scalar>(parts: Vec<Tensor<E>>) -> Result<Tensor<E>> {
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().unwrap());
    }
    Ok(concat(&parts, 0)?.mean())
}

/// Per-sample losses against the sample's ground truth. `student_trace` and
/// `teacher_trace` must already live on the same tape.
fn sample_terms<E: Scalar>(
    tape: &Tape<E>,
    out: &CascadeOutput<E>,
    sample: &Sample,
    weights: &crate::loss::LossWeights,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>, Tensor<E>)> {
    let gt_img = const_image(tape, &sample.target_image)?;
    let pm = &sample.target_points;
    let x_gt = const_plane(tape, &pm.xyz, &[3, pm.h, pm.w])?;
    let mask = const_plane(tape, &pm.conf, &[1, pm.h, pm.w])?;
    let nvs = loss_nvs(&out.image, &gt_img, weights)?;
    let render = splat_render(&out.gaussians, &sample.target_pose)?;
    let gs = loss_gs(&render, &gt_img, weights)?;
    let pts = loss_pts(&out.point_x, &out.point_c, &x_gt, &mask, weights)?;
    let smplx = loss_smplx(&out.body, &sample.body)?;
    Ok((nvs, gs, pts, smplx))
}

/// Deterministic epoch-shuffled pair order: a fresh permutation per epoch,
/// derived from the run seed.
fn batch_pairs(pair_count: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let per_epoch = pair_count.div_ceil(batch.max(1));
    let epoch = step / per_epoch.max(1);
    let mut order: Vec<usize> = (0..pair_count).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 + epoch as u64));
    order.shuffle(&mut rng);
    let start = (step % per_epoch.max(1)) * batch;
    (0..batch).map(|k| order[(start + k) % pair_count]).collect()
}

struct CsvLog {
    file: fs::File,
    path: PathBuf,
}

impl CsvLog {
    fn create(path: PathBuf) -> Result<CsvLog> {
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{}", LossReport::csv_header()).map_err(|e| Error::io(&path, e))?;
        Ok(CsvLog { file, path })
    }

    fn row(&mut self, report: &LossReport) -> Result<()> {
        writeln!(self.file, "{}", report.to_csv()).map_err(|e| Error::io(&self.path, e))
    }
}

fn load_samples(index: &DatasetIndex, pairs: &[Pair]) -> Result<Vec<Sample>> {
    pairs.iter().map(|&p| index.load_sample(p)).collect()
}

/// Full-attention teacher run. Backbone parameters anneal from
/// `lr_backbone`, new heads from `lr_heads`, both to the shared cosine
/// floor. Checkpoints every `checkpoint_every` steps plus the final state.
pub fn train_teacher<E: Scalar>(
    cfg: &RunConfig,
    index: &DatasetIndex,
    out_dir: &Path,
    mut progress: Option<&mut dyn FnMut(&LossReport)>,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let skeleton = ProxySkeleton::standard();
    let pairs = index.train_pairs(cfg.holdout);
    let samples = load_samples(index, &pairs)?;
    let mut state: ModelState<E> = ModelState::init(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::<E>::with_decay(cfg.weight_decay);
    let backbone = LrSchedule::Cosine {
        base: cfg.lr_backbone,
        min: cfg.lr_min,
        total_steps: cfg.steps as u64,
    };
    let heads = LrSchedule::Cosine {
        base: cfg.lr_heads,
        min: cfg.lr_min,
        total_steps: cfg.steps as u64,
    };
    let mut log = CsvLog::create(out_dir.join("teacher_loss.csv"))?;
    let mut last = None;
    for step in 0..cfg.steps {
        let tape: Tape<E> = Tape::new();
        let leaves = state.params.leaves(&tape)?;
        let (mut t_nvs, mut t_gs, mut t_pts, mut t_smplx) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &s in &batch_pairs(samples.len(), cfg.batch, step, cfg.seed) {
            let sample = &samples[s];
            let out = forward(
                &tape,
                &leaves,
                &cfg.model,
                &state.layout,
                &skeleton,
                &ForwardInput {
                    image: &sample.source_image,
                    source_pose: &sample.source_pose,
                    target_pose: &sample.target_pose,
                },
            )?;
            let (nvs, gs, pts, smplx) = sample_terms(&tape, &out, sample, &cfg.loss)?;
            t_nvs.push(nvs);
            t_gs.push(gs);
            t_pts.push(pts);
            t_smplx.push(smplx);
        }
        let terms = LossTerms {
            nvs: mean_of(t_nvs)?,
            gs: mean_of(t_gs)?,
            pts: mean_of(t_pts)?,
            smplx: mean_of(t_smplx)?,
            distill: None,
        };
        let (total, report) = loss_total(&terms, &cfg.loss, step as u64)?;
        let grads = backward(&total)?;
        let named = leaves.grads(&grads);
        let (lr_b, lr_h) = (backbone.at(step as u64), heads.at(step as u64));
        adamw(&mut state, &named, &mut opt, lr_b, lr_h)?;
        log.row(&report)?;
        if let Some(cb) = progress.as_deref_mut() {
            cb(&report);
        }
        last = Some(report);
        if (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            state.save(&out_dir.join(format!("teacher_step_{:06}.pmck", step + 1)))?;
        }
    }
    let checkpoint = out_dir.join("teacher.pmck");
    state.save(&checkpoint)?;
    Ok(TrainArtifacts {
        checkpoint,
        loss_csv: log.path,
        last_report: last,
    })
}

fn adamw<E: Scalar>(
    state: &mut ModelState<E>,
    named: &std::collections::BTreeMap<String, Vec<E>>,
    opt: &mut AdamW<E>,
    lr_backbone: f64,
    lr_heads: f64,
) -> Result<()> {
    crate::tensor::adamw_step(&mut state.params, named, opt, &|name| {
        if is_head_param(name) {
            lr_heads
        } else {
            lr_backbone
        }
    })
}

/// Progressive distillation from a converged teacher. The student starts as
/// a parameter copy; stitch events convert attention groups on the
/// schedule, and every step matches traced hidden states against the
/// frozen teacher at a fixed learning rate.
pub fn distill_run<E: Scalar>(
    cfg: &RunConfig,
    index: &DatasetIndex,
    teacher_path: &Path,
    out_dir: &Path,
    mut progress: Option<&mut dyn FnMut(&LossReport)>,
) -> Result<DistillArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let skeleton = ProxySkeleton::standard();
    let teacher: ModelState<E> = ModelState::load(teacher_path)?;
    let model_cfg = teacher.config.clone();
    let pairs = index.train_pairs(cfg.holdout);
    let samples = load_samples(index, &pairs)?;
    let schedule = StitchSchedule::new(
        model_cfg.m + model_cfg.n,
        model_cfg.group,
        cfg.distill_period as u64,
    )?;
    let mut student = ModelState {
        config: model_cfg.clone(),
        layout: teacher.layout.clone(),
        params: teacher.params.clone(),
    };
    let mut opt = AdamW::<E>::with_decay(cfg.weight_decay);
    let mut log = CsvLog::create(out_dir.join("distill_loss.csv"))?;
    let mut last = None;
    for step in 0..cfg.distill_steps {
        let want = schedule.layout_at(step as u64);
        if want != student.layout {
            crate::distill::stitch(&mut student, &want)?;
        }
        let tape: Tape<E> = Tape::new();
        let student_leaves = student.params.leaves(&tape)?;
        let teacher_leaves = teacher.params.constant_leaves(&tape)?;
        let (mut t_nvs, mut t_gs, mut t_pts, mut t_smplx, mut t_dst) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &s in &batch_pairs(samples.len(), cfg.batch, step, cfg.seed ^ 0x5151) {
            let sample = &samples[s];
            let input = ForwardInput {
                image: &sample.source_image,
                source_pose: &sample.source_pose,
                target_pose: &sample.target_pose,
            };
            let t_out = forward(&tape, &teacher_leaves, &model_cfg, &teacher.layout, &skeleton, &input)?;
            let s_out = forward(&tape, &student_leaves, &model_cfg, &student.layout, &skeleton, &input)?;
            let (nvs, gs, pts, smplx) = sample_terms(&tape, &s_out, sample, &cfg.loss)?;
            t_nvs.push(nvs);
            t_gs.push(gs);
            t_pts.push(pts);
            t_smplx.push(smplx);
            t_dst.push(loss_distill(&s_out.trace, &t_out.trace)?);
        }
        let terms = LossTerms {
            nvs: mean_of(t_nvs)?,
            gs: mean_of(t_gs)?,
            pts: mean_of(t_pts)?,
            smplx: mean_of(t_smplx)?,
            distill: Some(mean_of(t_dst)?),
        };
        let (total, report) = loss_total(&terms, &cfg.loss, step as u64)?;
        let grads = backward(&total)?;
        let named = student_leaves.grads(&grads);
        adamw(&mut student, &named, &mut opt, cfg.distill_lr, cfg.distill_lr)?;
        log.row(&report)?;
        if let Some(cb) = progress.as_deref_mut() {
            cb(&report);
        }
        last = Some(report);
        if (step + 1) % 1000 == 0 && step + 1 < cfg.distill_steps {
            student.save(&out_dir.join(format!("student_step_{:06}.pmck", step + 1)))?;
        }
    }
    let audit = out_dir.join("stitch_audit.csv");
    fs::write(&audit, schedule.audit()).map_err(|e| Error::io(&audit, e))?;
    let checkpoint = out_dir.join("student.pmck");
    student.save(&checkpoint)?;
    Ok(DistillArtifacts {
        checkpoint,
        loss_csv: log.path,
        audit,
        last_report: last,
    })
}

/// One no-grad forward pass.
pub fn infer<E: Scalar>(
    state: &ModelState<E>,
    skeleton: &ProxySkeleton,
    input: &ForwardInput,
) -> Result<(Image, Image)> {
    let tape: Tape<E> = Tape::new();
    let leaves: ParamLeaves<E> = state.params.constant_leaves(&tape)?;
    let out = forward(&tape, &leaves, &state.config, &state.layout, skeleton, input)?;
    let nvs = tensor_image(&out.image);
    let render = splat_render(&out.gaussians, input.target_pose)?;
    let gs = tensor_image(&render.slice(0, 0, 3)?);
    Ok((nvs, gs))
}

pub fn tensor_image<E: Scalar>(t: &Tensor<E>) -> Image {
    let shape = t.shape();
    Image {
        channels: shape[0],
        h: shape[1],
        w: shape[2],
        data: t
            .value()
            .iter()
            .map(|v| <E as Scalar>::to_f64(*v) as f32)
            .collect(),
    }
}

/// PSNR and SSIM of the image head's renders over the given pairs.
pub fn evaluate<E: Scalar>(
    state: &ModelState<E>,
    index: &DatasetIndex,
    pairs: &[Pair],
) -> Result<MetricReport> {
    let skeleton = ProxySkeleton::standard();
    let mut report = MetricReport::default();
    for &pair in pairs {
        let sample = index.load_sample(pair)?;
        let (nvs, _) = infer(
            state,
            &skeleton,
            &ForwardInput {
                image: &sample.source_image,
                source_pose: &sample.source_pose,
                target_pose: &sample.target_pose,
            },
        )?;
        report.push(
            pair.identity,
            pair.target_view,
            psnr(&nvs, &sample.target_image)?,
            ssim(&nvs, &sample.target_image)?,
        );
    }
    Ok(report)
}
