use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lumaflow_core::data::{
    export_frames, load_clips, read_clip, read_image, validate_paired_dataset, write_clip, write_dataset, MANIFEST_NAME,
};
use lumaflow_core::flow::sample_edit;
use lumaflow_core::metrics::{evaluate_with, metric_sf_with, psnr, MetricsReport};
use lumaflow_core::nn::Checkpoint;
use lumaflow_core::trainer::{LossLog, Trainer};
use lumaflow_core::{LoraSet, ResidualMode, SamplerConfig, VelocityNet, VideoClip};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "lumaflow",
    version,
    about = "Colour and illumination editing of short videos with rectified flow"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset of clips or paired source/reference/target triples.
    GenData(GenDataArgs),
    /// Train the velocity network on a clip dataset.
    Train(TrainArgs),
    /// Recolour a clip to match a reference image.
    Edit(EditArgs),
    /// Print quality metrics of an edited clip as CSV.
    Eval(EvalArgs),
    /// Edit a clip towards its own first frame with and without rectification.
    DemoIdentity(DemoArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory (also settable as `paths.out` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write source/reference/target triples instead of single clips.
    #[arg(long)]
    pub paired: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    /// Seeds both batch sampling and the perturbations.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Weight of the consistency term.
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    SharedState,
    StraightPath,
}

impl From<ModeArg> for ResidualMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::SharedState => ResidualMode::SharedState,
            ModeArg::StraightPath => ResidualMode::StraightPath,
        }
    }
}

#[derive(Debug, Args)]
pub struct SamplerFlags {
    /// Rectification strength; 0 disables it.
    #[arg(long)]
    pub gamma: Option<f32>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Recompute the residual velocity every this many steps.
    #[arg(long)]
    pub cache_stride: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub residual_mode: Option<ModeArg>,
}

impl SamplerFlags {
    fn apply(&self, cfg: &mut SamplerConfig) {
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(n) = self.steps {
            cfg.num_steps = n;
        }
        if let Some(k) = self.cache_stride {
            cfg.residual_cache_stride = k;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.residual_mode {
            cfg.residual_mode = m.into();
        }
    }
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    /// Reference image (a VCLP file; its first frame is used).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write PPM frames; defaults to `<out>_frames`.
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth clip; fills the `psnr_gt` column.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Also append the rows to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cache_stride: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
        Command::DemoIdentity(a) => demo_identity(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if a.out.is_some() {
        cfg.paths.out = a.out;
    }
    cfg.validate()?;
    let out = cfg
        .paths
        .out
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    let manifest = write_dataset(&out, a.count, a.seed, &cfg.scene, a.paired)?;
    let kind = if a.paired { "paired samples" } else { "clips" };
    println!("wrote {} {kind} to {}", manifest.entries.len(), out.display());
    if a.paired {
        let n = validate_paired_dataset(&out, &cfg.scene)?;
        println!("validated {n} paired samples");
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = a.total_steps {
        t.total_steps = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
        t.perturb.seed = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.alpha {
        t.alpha = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    let p = &mut cfg.paths;
    for (flag, slot) in [
        (a.data, &mut p.data),
        (a.out, &mut p.out),
        (a.loss_csv, &mut p.loss_csv),
        (a.resume, &mut p.resume),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    cfg.validate()?;
    let data = cfg
        .paths
        .data
        .clone()
        .ok_or_else(|| CliError::Config("--data is required".into()))?;
    let out = cfg
        .paths
        .out
        .clone()
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    require_file(&data.join(MANIFEST_NAME), "dataset manifest")?;
    if let Some(r) = &cfg.paths.resume {
        require_file(r, "resume checkpoint")?;
    }
    let loss_csv = cfg.paths.loss_csv.clone().unwrap_or_else(|| out.with_extension("csv"));

    let clips = load_clips(&data)?;
    let mut trainer = match &cfg.paths.resume {
        Some(r) => Trainer::resume(cfg.train.clone(), &Checkpoint::read(r)?)?,
        None => Trainer::new(cfg.train.clone())?,
    };
    let total = cfg.train.total_steps;
    let every = (total / 10).max(1);
    let mut log = if cfg.paths.resume.is_some() {
        LossLog::resume(&loss_csv, trainer.step())?
    } else {
        LossLog::create(&loss_csv)?
    };
    let result = trainer.run(&clips, Some(&out), |r| {
        log.append(r)?;
        if (r.step + 1) % every == 0 {
            eprintln!(
                "step {}/{total}: loss_fm {:.5} loss_consis {:.5} loss_total {:.5}",
                r.step + 1,
                r.loss_fm,
                r.loss_consis,
                r.loss_total
            );
        }
        Ok(())
    });
    log.finish()?;
    let history = result?;
    trainer.checkpoint().write(&out)?;
    match history.last() {
        Some(r) => println!(
            "final step {}: loss_fm {:.6} loss_consis {:.6} loss_total {:.6}",
            r.step + 1,
            r.loss_fm,
            r.loss_consis,
            r.loss_total
        ),
        None => println!("no steps to run; checkpoint already at step {}", trainer.step()),
    }
    println!("checkpoint: {}", out.display());
    println!("loss log: {}", loss_csv.display());
    Ok(())
}

/// Network from a checkpoint with any trained adapters folded in.
fn load_model(path: &Path) -> Result<VelocityNet<f32>, CliError> {
    let ck = Checkpoint::read(path)?;
    let net = VelocityNet::from_checkpoint(&ck)?;
    Ok(match LoraSet::load_from(&ck)? {
        Some(set) => set.merge_into(&net)?,
        None => net,
    })
}

fn edit(a: EditArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    a.sampler.apply(&mut cfg.sampler);
    cfg.validate()?;
    require_file(&a.ckpt, "checkpoint")?;
    require_file(&a.src, "source clip")?;
    require_file(&a.reference, "reference image")?;

    let net = load_model(&a.ckpt)?;
    let src = read_clip(&a.src)?;
    let reference = read_image(&a.reference)?;
    let edited = sample_edit(&net, &src, &reference, &cfg.sampler)?;
    write_clip(&a.out, &edited)?;
    let frames_dir = a.frames_dir.unwrap_or_else(|| sibling_dir(&a.out, "frames"));
    let frames = export_frames(&edited, &frames_dir, "frame")?;
    println!(
        "sampler: {}",
        serde_json::to_string(&cfg.sampler).expect("sampler config serialises")
    );
    println!(
        "wrote {} and {} frames to {}",
        a.out.display(),
        frames.len(),
        frames_dir.display()
    );
    Ok(())
}

/// `<dir>/<stem>_<suffix>` next to `path`.
fn sibling_dir(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}"))
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    cfg.validate()?;
    require_file(&a.src, "source clip")?;
    require_file(&a.out, "edited clip")?;
    if let Some(gt) = &a.gt {
        require_file(gt, "ground-truth clip")?;
    }
    let src = read_clip(&a.src)?;
    let out = read_clip(&a.out)?;
    let gt = a.gt.as_ref().map(read_clip).transpose()?;
    let report = evaluate_with(&src, &out, gt.as_ref(), &cfg.metrics)?;
    let name = a
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mean = MetricsReport::mean(&[report]).expect("one report");
    let rows = [report.csv_row(&name), mean.csv_row("mean")];

    println!("{}", MetricsReport::CSV_HEADER);
    for r in &rows {
        println!("{r}");
    }
    if let Some(path) = &a.csv {
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(lumaflow_core::Error::from)?;
        let mut text = String::new();
        if fresh {
            text.push_str(MetricsReport::CSV_HEADER);
            text.push('\n');
        }
        for r in &rows {
            text.push_str(r);
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(lumaflow_core::Error::from)?;
    }
    Ok(())
}

fn demo_identity(a: DemoArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let flags = SamplerFlags {
        gamma: None,
        steps: a.steps,
        cache_stride: a.cache_stride,
        seed: a.seed,
        residual_mode: None,
    };
    flags.apply(&mut cfg.sampler);
    cfg.validate()?;
    require_file(&a.ckpt, "checkpoint")?;
    require_file(&a.src, "source clip")?;

    let net = load_model(&a.ckpt)?;
    let src = read_clip(&a.src)?;
    let reference = src.first_frame();
    let run = |gamma: f32| -> Result<(f32, f32), CliError> {
        let sampler = SamplerConfig { gamma, ..cfg.sampler };
        let out: VideoClip = sample_edit(&net, &src, &reference, &sampler)?;
        Ok((metric_sf_with(&src, &out, &cfg.metrics)?, psnr(&out, &src)?))
    };
    let (sf0, p0) = run(0.0)?;
    let (sf1, p1) = run(1.0)?;
    println!("{:<8}{:>12}{:>12}{:>12}", "metric", "gamma=0", "gamma=1", "delta");
    println!("{:<8}{sf0:>12.4}{sf1:>12.4}{:>+12.4}", "sf", sf1 - sf0);
    println!("{:<8}{p0:>12.4}{p1:>12.4}{:>+12.4}", "psnr", p1 - p0);
    Ok(())
}
