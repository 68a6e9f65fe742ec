use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rainforge::checkpoint::Checkpoint;
use rainforge::config::RunConfig;
use rainforge::data::DataSource;
use rainforge::eval::{derain_path, evaluate_dirs, mean_row, synth_dir, write_csv};
use rainforge::gradsuite::run_suite;
use rainforge::train::Trainer;

/// Image deraining: train, restore, evaluate and synthesize rain.
#[derive(Parser)]
#[command(name = "rainforge", version)]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the initialization, data and rain seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing a CSV log and checkpoints to --out.
    Train(TrainArgs),
    /// Restore a PNG file or directory of PNGs with a trained checkpoint.
    Derain {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Per-image PSNR/SSIM of restored images against same-named clean ones.
    Eval {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        restored: PathBuf,
        /// Also write the table to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Add synthetic rain to every PNG in --clean.
    Synth(SynthArgs),
    /// Run the double-precision finite-difference gradient suite.
    Gradcheck,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    val_every: Option<u64>,
    /// Directory of clean PNGs; pairs with --rainy-dir, or gets synthetic
    /// rain when used alone.
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    #[arg(long, requires = "clean_dir")]
    rainy_dir: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long, conflicts_with_all = ["clean_dir", "rainy_dir", "lambda", "batch_size", "crop"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Blend weight of the rain layer.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    streaks: Option<usize>,
    #[arg(long)]
    blur: Option<f64>,
    #[arg(long)]
    thickness: Option<f64>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

/// All computation runs on the calling thread, so the only accepted value
/// is a positive integer and it has no further effect.
fn check_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RAINFORGE_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {}
            _ => bail!("RAINFORGE_THREADS must be a positive integer, got {v:?}"),
        }
    }
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            if let Some(n) = args.iters {
                ckpt.config.train.iterations = n;
            }
            Trainer::resume(&ckpt)?
        }
        None => {
            let mut cfg = load_config(cli)?;
            let t = &mut cfg.train;
            t.iterations = args.iters.unwrap_or(t.iterations);
            t.lr_init = args.lr.unwrap_or(t.lr_init);
            t.val_every = args.val_every.unwrap_or(t.val_every);
            cfg.model.lambda = args.lambda.unwrap_or(cfg.model.lambda);
            cfg.data.batch_size = args.batch_size.unwrap_or(cfg.data.batch_size);
            cfg.data.crop = args.crop.unwrap_or(cfg.data.crop);
            match (&args.clean_dir, &args.rainy_dir) {
                (Some(clean), Some(rainy)) => cfg.data.source = DataSource::Paired { clean: clean.clone(), rainy: rainy.clone() },
                (Some(clean), None) => cfg.data.source = DataSource::CleanOnly { clean: clean.clone() },
                _ => {}
            }
            cfg.validate()?;
            Trainer::new(cfg)?
        }
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    std::fs::write(args.out.join("config.json"), trainer.config.to_json())?;
    let log_path = args.out.join("log.csv");
    let mut log = if trainer.iteration() == 0 {
        File::create(&log_path)
    } else {
        File::options().append(true).create(true).open(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    eprintln!(
        "training {} parameters for {} iterations from iteration {}",
        rainforge::checkpoint::param_count(&trainer.config)?,
        trainer.config.train.iterations,
        trainer.iteration()
    );
    let records = trainer.run(Some(&args.out), &mut log)?;
    for r in records.iter().filter(|r| r.validation.is_some()) {
        let v = r.validation.expect("filtered");
        eprintln!(
            "iter {:>6}  loss {:>9.4}  val psnr {:.3} dB  ssim {:.4}  (rainy {:.3} dB)",
            r.iteration + 1,
            r.loss,
            v.psnr,
            v.ssim,
            v.rainy_psnr
        );
    }
    Ok(())
}

fn eval(clean: &Path, restored: &Path, csv: Option<&Path>) -> Result<()> {
    let rows = evaluate_dirs(clean, restored)?;
    write_csv(&rows, std::io::stdout().lock())?;
    if let Some(path) = csv {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        write_csv(&rows, &mut w)?;
        w.flush()?;
    }
    let mean = mean_row(&rows);
    eprintln!("{} images: mean psnr {:.4} dB, mean ssim {:.5}", rows.len(), mean.psnr_db, mean.ssim);
    Ok(())
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let mut rain = load_config(cli)?.rain;
    rain.alpha = args.alpha.unwrap_or(rain.alpha);
    rain.streak_count = args.streaks.unwrap_or(rain.streak_count);
    rain.blur_radius = args.blur.unwrap_or(rain.blur_radius);
    rain.thickness = args.thickness.unwrap_or(rain.thickness);
    let written = synth_dir(&args.clean, &args.out, &rain)?;
    eprintln!("wrote {} rainy images to {}", written.len(), args.out.display());
    Ok(())
}

/// Returns whether every check passed.
fn gradcheck() -> Result<bool> {
    let outcomes = run_suite()?;
    let mut failed = 0;
    for c in &outcomes {
        let tag = if c.passed() { "ok  " } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!(
            "{tag} {:<36} max rel err {:.2e} (tol {:.0e}, {} coords, {} kinks skipped)",
            c.name, c.report.max_rel_error, c.report.tol, c.report.checked, c.report.kinks
        );
    }
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    Ok(failed == 0)
}

fn run(cli: &Cli) -> Result<bool> {
    check_threads()?;
    match &cli.command {
        Command::Train(args) => train(cli, args)?,
        Command::Derain { input, out, ckpt } => {
            let model = Checkpoint::load(ckpt)?.model()?;
            let written = derain_path(&model, input, out)?;
            eprintln!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Eval { clean, restored, csv } => {
            load_config(cli)?;
            eval(clean, restored, csv.as_deref())?
        }
        Command::Synth(args) => synth(cli, args)?,
        Command::Gradcheck => return gradcheck(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
