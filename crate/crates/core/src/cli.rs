//! Command-line front end for the `vdtr` binary.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{
    load_dataset, save_dataset, synth_dataset, write_pgm, write_ppm, FramesClip, Image,
    SceneOptions,
};
use crate::error::{Error, Result};
use crate::gradcheck::suite::gradient_suite;
use crate::model::Vdtr;
use crate::tensor::Tensor;
use crate::tensor_io::write_tensor;
use crate::train::{evaluate, Trainer};
use crate::window::{attention_flop_count, AttnCostConfig, AttnCostReport, AttnMode};

#[derive(Debug, Parser)]
#[command(name = "vdtr", version, about = "Windowed-attention video deblurring")]
pub struct Cli {
    /// Config file (`key = value` lines); defaults to the desk preset.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on synthetic clips (or a clip directory) and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint: per-clip and mean PSNR/SSIM as CSV.
    Eval(EvalArgs),
    /// Finite-difference check of every block type.
    Gradcheck,
    /// Analytic and measured attention cost as CSV.
    BenchAttn(BenchArgs),
    /// Write synthetic clips as PPM files.
    SynthData(SynthArgs),
    /// Dump per-frame and fused features of the first clip.
    DumpFeatures(DumpArgs),
}

#[derive(Debug, Args)]
pub struct DataSource {
    /// Clip directory written by `synth-data`; synthesized from the seed when absent.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR", default_value = "run")]
    pub out: PathBuf,
    /// Overrides `train.steps`.
    #[arg(long, value_name = "N")]
    pub steps: Option<u64>,
    /// Resume from this checkpoint instead of a fresh model.
    #[arg(long, value_name = "PATH")]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub source: DataSource,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    /// Also write restored frames and the CSV here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub source: DataSource,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_name = "N", default_value_t = 8)]
    pub hw: usize,
    #[arg(long, value_name = "N", default_value_t = 4)]
    pub d: usize,
    #[arg(long, value_name = "N", default_value_t = 4)]
    pub m: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR", default_value = "clips")]
    pub out: PathBuf,
    /// Overrides `data.clips`.
    #[arg(long, value_name = "N")]
    pub clips: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    /// Trained weights; a fresh model from the config otherwise.
    #[arg(long, value_name = "PATH")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_name = "DIR", default_value = "features")]
    pub out: PathBuf,
    #[command(flatten)]
    pub source: DataSource,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Clips from `--data`, or synthesized from the config with the train seed.
fn clips(cfg: &Config, source: &DataSource) -> Result<Vec<FramesClip>> {
    match &source.data {
        Some(dir) => load_dataset(dir),
        None => {
            let d = &cfg.data;
            synth_dataset(
                cfg.train.seed,
                d.clips,
                d.height,
                d.width,
                cfg.model.neighbors,
                d.blur_frames,
                &SceneOptions::default(),
            )
        }
    }
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut trainer = match &args.ckpt {
        Some(p) => Trainer::from_checkpoint(&Checkpoint::load(p)?)?,
        None => Trainer::new(&load_config(cli)?)?,
    };
    let steps = args.steps.unwrap_or(trainer.config.train.steps);
    let data = clips(&trainer.config, &args.source)?;
    fs::create_dir_all(&args.out)?;
    let mut csv = String::from("step,total,charbonnier,perceptual\n");
    let result = trainer.run(&data, steps, |s| {
        csv.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            s.step, s.total, s.charbonnier, s.perceptual
        ));
        if s.step % 10 == 0 {
            info!("step {:>5}  loss {:.6}", s.step, s.total);
        }
    });
    fs::write(args.out.join("loss.csv"), &csv)?;
    match result {
        Ok(trace) => {
            let path = args.out.join("checkpoint.vdtc");
            trainer.checkpoint().save(&path)?;
            if let (Some(a), Some(b)) = (trace.first(), trace.last()) {
                println!(
                    "loss {:.6} -> {:.6} over {} steps",
                    a.total,
                    b.total,
                    trace.len()
                );
            }
            println!("checkpoint {}", path.display());
            Ok(())
        }
        Err(Error::NonFiniteLoss { step, last_good }) => {
            let path = args.out.join("last_good.vdtc");
            last_good.save(&path)?;
            eprintln!("preceding state saved to {}", path.display());
            Err(Error::NonFiniteLoss { step, last_good })
        }
        Err(e) => Err(e),
    }
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let mut ckpt = Checkpoint::load(&args.ckpt)?;
    if let Some(seed) = cli.seed {
        ckpt.config.train.seed = seed;
    }
    let model = ckpt.model()?;
    let data = clips(&ckpt.config, &args.source)?;
    let report = evaluate(&model, &data)?;
    let csv = report.to_csv();
    print!("{csv}");
    eprintln!(
        "blurry baseline: psnr {:.4} dB, ssim {:.4}",
        report.mean_baseline_psnr(),
        report.mean_baseline_ssim()
    );
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.csv"), &csv)?;
        for clip in &data {
            let restored = model.restore(&clip.blurry_tensors())?;
            write_ppm(
                &out.join(format!("restored_{:03}.ppm", clip.id)),
                &Image::from_tensor(&restored)?,
            )?;
        }
    }
    Ok(())
}

fn gradcheck(cli: &Cli) -> Result<bool> {
    let cases = gradient_suite(cli.seed.unwrap_or(0))?;
    for c in &cases {
        println!("{}", c.summary());
    }
    Ok(cases.iter().all(|c| c.report.passed()))
}

fn bench_attn(args: &BenchArgs) -> Result<bool> {
    let mut ok = true;
    println!("{}", AttnCostReport::CSV_HEADER);
    for mode in [AttnMode::Window, AttnMode::Global] {
        let r = attention_flop_count(AttnCostConfig {
            mode,
            height: args.hw,
            width: args.hw,
            d: args.d,
            window: args.m,
        })?;
        ok &= r.analytic_macs == r.measured_macs;
        println!("{}", r.csv_row());
    }
    Ok(ok)
}

fn synth_data(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(n) = args.clips {
        cfg.data.clips = n;
    }
    let data = clips(&cfg, &DataSource { data: None })?;
    save_dataset(&args.out, &data)?;
    println!("{} clips written to {}", data.len(), args.out.display());
    Ok(())
}

/// Channel mean rescaled to `[0, 1]` for viewing.
fn mean_plane(f: &Tensor) -> (usize, usize, Vec<f64>) {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut plane = vec![0.0; h * w];
    for ch in 0..c {
        for (acc, v) in plane
            .iter_mut()
            .zip(&f.data()[ch * h * w..(ch + 1) * h * w])
        {
            *acc += v / c as f64;
        }
    }
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    (h, w, plane.iter().map(|v| (v - lo) / span).collect())
}

fn dump(out: &Path, stem: &str, f: &Tensor) -> Result<()> {
    write_tensor(&out.join(format!("{stem}.vdt")), f)?;
    let (h, w, plane) = mean_plane(f);
    write_pgm(&out.join(format!("{stem}.pgm")), h, w, &plane)
}

fn dump_features(cli: &Cli, args: &DumpArgs) -> Result<()> {
    let (cfg, model) = match &args.ckpt {
        Some(p) => {
            let mut ckpt = Checkpoint::load(p)?;
            if let Some(seed) = cli.seed {
                ckpt.config.train.seed = seed;
            }
            (ckpt.config, ckpt.model()?)
        }
        None => {
            let cfg = load_config(cli)?;
            (cfg, Vdtr::new(&cfg.model, cfg.train.seed)?)
        }
    };
    let data = clips(&cfg, &args.source)?;
    let clip = data
        .first()
        .ok_or_else(|| Error::Format("no clips to dump".into()))?;
    fs::create_dir_all(&args.out)?;
    let features = model.frame_features(&clip.blurry_tensors())?;
    for (i, f) in features.iter().enumerate() {
        dump(&args.out, &format!("frame_{i}"), f)?;
    }
    dump(&args.out, "fused", &model.temporal.forward(&features)?)?;
    println!(
        "{} feature maps written to {}",
        features.len() + 1,
        args.out.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(a) => train(cli, a).map(|_| true),
        Command::Eval(a) => eval(cli, a).map(|_| true),
        Command::Gradcheck => gradcheck(cli),
        Command::BenchAttn(a) => bench_attn(a),
        Command::SynthData(a) => synth_data(cli, a).map(|_| true),
        Command::DumpFeatures(a) => dump_features(cli, a).map(|_| true),
    }
}

/// Parses `args` and runs the command. Usage errors exit with 2, runtime
/// errors and failed checks with 1.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = run(&cli);
    let _ = std::io::stdout().flush();
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
