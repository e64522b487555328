//! Command-line harness: data generation, teacher training, progressive
//! distillation, evaluation, attention benchmarking and single-shot
//! rendering. Exit codes: 0 success, 2 I/O or configuration, 3 numeric
//! failure, 4 schedule violation.

use clap::{Args, Parser, Subcommand};
use prism::attention::{bench_csv_header, bench_scaling};
use prism::camera::CameraPose;
use prism::cascade::{ForwardInput, ModelState};
use prism::config::RunConfig;
use prism::dataset::DatasetIndex;
use prism::error::{Error, Result};
use prism::image_io::{read_ppm, write_ppm};
use prism::loss::LossReport;
use prism::synth::{make_dataset, FRUSTUM_DEG};
use prism::train::{distill_run, evaluate, infer, train_teacher};
use std::fs;
use std::path::{Path, PathBuf};

#[global_allocator]
static ALLOC: prism::alloc_track::CountingAlloc = prism::alloc_track::CountingAlloc;

#[derive(Parser)]
#[command(name = "prism", version, about = "Cascaded novel-view synthesis of capsule humanoids")]
struct Cli {
    #[command(flatten)]
    common: Common,
    /// Print the effective config with provenance annotations and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// key=value config file layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Inline override, repeatable: --set steps=100
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData {
        /// Output directory; defaults to the config's data_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the all-full-attention teacher.
    TrainTeacher {
        /// Dataset directory or manifest path; defaults to data_dir.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory; defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill the teacher into a mostly-linear-attention student.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render every held-out view and report PSNR/SSIM.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Metrics CSV path; defaults to eval.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time full vs linear attention over a sequence-length sweep.
    BenchAttn {
        /// Comma-separated sequence lengths.
        #[arg(long = "n-list", default_value = "512,1024,2048,4096")]
        n_list: String,
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Scaling CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// One forward pass: novel view from a source image and two poses.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source_image: PathBuf,
        #[arg(long)]
        source_pose: PathBuf,
        #[arg(long)]
        target_pose: PathBuf,
        /// Image-head output PPM.
        #[arg(long)]
        out: PathBuf,
        /// Optional splat-composited output PPM.
        #[arg(long)]
        gaussians: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_path(data: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    let base = data.unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
    if base.is_dir() {
        base.join("manifest.csv")
    } else {
        base
    }
}

fn progress_printer(tag: &'static str, every: usize) -> impl FnMut(&LossReport) {
    let mut n = 0usize;
    move |r: &LossReport| {
        n += 1;
        if n % every == 0 {
            eprintln!("{tag} step {}: total {:.6e}", r.step, r.total);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.common)?;
    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no command given; see --help".into()));
    };
    match command {
        Command::GenData { out, seed } => {
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
            let manifest = make_dataset(
                &out,
                cfg.identities,
                cfg.views,
                cfg.model.width,
                cfg.model.height,
                seed.unwrap_or(cfg.seed),
            )?;
            let assets = fs::read_to_string(&manifest)
                .map_err(|e| Error::io(&manifest, e))?
                .lines()
                .count()
                .saturating_sub(1);
            println!("{} ({assets} assets)", manifest.display());
        }
        Command::TrainTeacher { data, out } => {
            let index = DatasetIndex::load(&manifest_path(data, &cfg))?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let mut last: Option<LossReport> = None;
            let mut print = progress_printer("teacher", 50);
            let mut cb = |r: &LossReport| {
                print(r);
                last = Some(*r);
            };
            let res = train_teacher::<f32>(&cfg, &index, &out, Some(&mut cb));
            match res {
                Ok(art) => {
                    println!("{}", art.checkpoint.display());
                    println!("{}", art.loss_csv.display());
                }
                Err(e) => {
                    if let Some(r) = last {
                        eprintln!("last loss row: {}", r.to_csv());
                    }
                    return Err(e);
                }
            }
        }
        Command::Distill { teacher, data, out } => {
            let index = DatasetIndex::load(&manifest_path(data, &cfg))?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let mut print = progress_printer("distill", 50);
            let art = distill_run::<f32>(&cfg, &index, &teacher, &out, Some(&mut print))?;
            println!("{}", art.checkpoint.display());
            println!("{}", art.audit.display());
            println!("{}", art.loss_csv.display());
        }
        Command::Eval { checkpoint, data, out } => {
            let index = DatasetIndex::load(&manifest_path(data, &cfg))?;
            let state: ModelState<f32> = ModelState::load(&checkpoint)?;
            let pairs = index.heldout_pairs(cfg.holdout);
            let report = evaluate(&state, &index, &pairs)?;
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("eval.csv")
            });
            fs::write(&out, report.to_csv()).map_err(|e| Error::io(&out, e))?;
            println!("{}", out.display());
            println!(
                "views {} mean_psnr {:.3} mean_ssim {:.4}",
                report.view_count(),
                report.mean_psnr(),
                report.mean_ssim()
            );
        }
        Command::BenchAttn { n_list, d, heads, reps, out, seed } => {
            let ns = parse_n_list(&n_list)?;
            let rows = bench_scaling(&ns, d, heads, reps, seed)?;
            let mut csv = String::from(bench_csv_header());
            csv.push('\n');
            for row in &rows {
                csv.push_str(&row.to_csv());
                csv.push('\n');
            }
            fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
            println!("{}", out.display());
        }
        Command::Render { checkpoint, source_image, source_pose, target_pose, out, gaussians } => {
            let state: ModelState<f32> = ModelState::load(&checkpoint)?;
            let image = read_ppm(&source_image)?;
            let src = read_pose(&source_pose, image.w, image.h)?;
            let tgt = read_pose(&target_pose, state.config.width, state.config.height)?;
            warn_outside_frustum(&tgt);
            let (nvs, gs) = infer(
                &state,
                &prism::body::ProxySkeleton::standard(),
                &ForwardInput {
                    image: &image,
                    source_pose: &src,
                    target_pose: &tgt,
                },
            )?;
            write_ppm(&out, &nvs)?;
            println!("{}", out.display());
            if let Some(path) = gaussians {
                write_ppm(&path, &gs)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn parse_n_list(text: &str) -> Result<Vec<usize>> {
    let ns: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad --n-list {text:?}")))?;
    if ns.is_empty() {
        return Err(Error::Config("--n-list is empty".into()));
    }
    Ok(ns)
}

fn read_pose(path: &Path, width: usize, height: usize) -> Result<CameraPose> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CameraPose::from_record(&text, width, height)
}

/// The model is trained inside the frontal frustum; synthesis beyond it is
/// allowed but flagged.
fn warn_outside_frustum(pose: &CameraPose) {
    let back = pose.rot.row(2);
    let yaw = back.x.atan2(back.z).to_degrees();
    let pitch = back.y.asin().to_degrees();
    if yaw.abs() > FRUSTUM_DEG + 1e-6 || pitch.abs() > FRUSTUM_DEG + 1e-6 {
        eprintln!(
            "warning: target pose is {yaw:.1} deg yaw / {pitch:.1} deg pitch from frontal, \
             outside the trained +/-{FRUSTUM_DEG:.0} deg frustum"
        );
    }
}
