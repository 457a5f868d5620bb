use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use phenocd::config::RunConfig;
use phenocd::constrainer::PhenoCentroidBank;
use phenocd::detector::{binarize, images_to_tensor};
use phenocd::orchestrator::{self, Dataset, RunDir, Variant};
use phenocd::scenegen::{quantize, read_rgb_png, write_gray_png};
use phenocd::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

#[derive(Parser)]
#[command(name = "phenocd", version, about = "Phenology-aware bi-temporal change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage, or all three in order.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the run's best checkpoint on one split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write change and probability maps for one image pair.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test a grid of fusion blocks and constraint sets.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated `fusion:chain` names; the full grid when omitted.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Run every oracle and gradient check.
    Selftest,
}

enum Failure {
    Core(Error),
    Selftest(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::Validation(_)
        | Error::Ingestion { .. }
        | Error::Precondition(_)
        | Error::Json { .. } => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(root: &Path, cfg: &RunConfig) -> Result<Dataset, Error> {
    let data = Dataset::load(root)?;
    data.check(cfg)?;
    Ok(data)
}

fn gen_data(config: Option<&Path>, out: &Path, count: Option<usize>, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg = load_config(config)?;
    if let Some(c) = count {
        cfg.dataset.count = c;
    }
    if let Some(s) = seed {
        cfg.scene.seed = s;
    }
    cfg.validate()?;
    let data = Dataset::generate(&cfg.scene, cfg.dataset.count, cfg.dataset.ratios)?;
    data.write(out)?;
    cfg.save(&out.join("config.json"))?;
    println!(
        "{}",
        serde_json::json!({"out": out, "train": data.train.len(), "val": data.val.len(), "test": data.test.len()})
    );
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, stage: Stage, out: &Path) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let data = load_data(data, &cfg)?;
    let run = RunDir::new(out);
    let summary = match stage {
        Stage::One => {
            let s = orchestrator::run_stage1(&run, &cfg, &data)?;
            serde_json::json!({"stage1": {"best_iou": s.state.best_iou, "best_epoch": s.state.best_epoch}})
        }
        Stage::Two => {
            let s = orchestrator::run_stage2(&run, &cfg, &data)?;
            serde_json::json!({"stage2": {"mean_ari": s.mean_ari}})
        }
        Stage::Three => {
            let path = run.centroids();
            if !path.exists() {
                return Err(Error::Precondition(format!("stage 3 needs {}", path.display())));
            }
            let bank = PhenoCentroidBank::load(&path)?;
            let s = orchestrator::run_stage3(&run, &cfg, &data, &bank)?;
            serde_json::json!({"stage3": {"best_iou": s.state.best_iou, "best_epoch": s.state.best_epoch}})
        }
        Stage::All => {
            let o = orchestrator::run_all(&run, &cfg, &data)?;
            serde_json::json!({
                "stage1": {"best_iou": o.stage1.best_iou, "best_epoch": o.stage1.best_epoch},
                "stage2": {"mean_ari": o.stage2.mean_ari},
                "stage3": {"best_iou": o.stage3.best_iou, "best_epoch": o.stage3.best_epoch},
            })
        }
    };
    println!("{summary}");
    Ok(())
}

fn run_config(run: &RunDir) -> Result<RunConfig, Error> {
    let path = run.config();
    if !path.exists() {
        return Err(Error::Precondition(format!("{} is not a run directory", run.root.display())));
    }
    let cfg = RunConfig::load(&path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn eval(run: &Path, data: &Path, split: &str) -> Result<(), Error> {
    if !matches!(split, "train" | "val" | "test") {
        return Err(Error::config("split", "must be train, val or test"));
    }
    let run = RunDir::new(run);
    let cfg = run_config(&run)?;
    let data = load_data(data, &cfg)?;
    let report = orchestrator::evaluate(&run, &cfg, &data, split)?;
    println!("{}", report.to_json());
    Ok(())
}

fn predict(run: &Path, t1: &Path, t2: &Path, out: &Path) -> Result<(), Error> {
    let run = RunDir::new(run);
    let cfg = run_config(&run)?;
    let (dir, _) = run.final_checkpoint()?;
    let (a, h, w) = read_rgb_png(t1)?;
    let (b, h2, w2) = read_rgb_png(t2)?;
    if (h, w) != (h2, w2) || (h, w) != (cfg.detector.height, cfg.detector.width) {
        return Err(Error::Validation(format!(
            "images are {h}x{w} and {h2}x{w2}, the model expects {}x{}",
            cfg.detector.height, cfg.detector.width
        )));
    }
    let net = orchestrator::load_network(&cfg, &dir)?;
    let prob = net
        .detector
        .predict(&net.store, images_to_tensor::<f32>(&[&a], h, w)?, images_to_tensor::<f32>(&[&b], h, w)?)?
        .into_data();
    let change: Vec<u8> = binarize(&prob, cfg.detector.threshold).iter().map(|&c| c * 255).collect();
    let gray: Vec<u8> = prob.iter().map(|&p| quantize(p)).collect();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_gray_png(&out.join("change.png"), &change, h, w)?;
    write_gray_png(&out.join("probability.png"), &gray, h, w)?;
    let changed = change.iter().filter(|&&c| c > 0).count();
    println!(
        "{}",
        serde_json::json!({"out": out, "changed_fraction": changed as f64 / change.len() as f64})
    );
    Ok(())
}

fn ablate(config: Option<&Path>, data: &Path, variants: Option<&str>, seeds: &str, out: &Path) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let variants = match variants {
        Some(list) => list.split(',').map(|v| Variant::parse(v.trim())).collect::<Result<Vec<_>, _>>()?,
        None => Variant::grid(),
    };
    let seeds = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| Error::config("seeds", format!("`{s}` is not a seed"))))
        .collect::<Result<Vec<_>, _>>()?;
    let data = load_data(data, &cfg)?;
    let table = orchestrator::ablate(&cfg, &data, &variants, &seeds, out)?;
    println!("{}", table.to_json());
    Ok(())
}

fn selftest() -> Result<(), Failure> {
    let records = phenocd::verify::selftest();
    for r in &records {
        println!("{}", r.to_json_line());
    }
    let failed = records.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        Err(Failure::Selftest(failed))
    } else {
        Ok(())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            config,
            out,
            count,
            seed,
        } => gen_data(config.as_deref(), &out, count, seed)?,
        Command::Train {
            config,
            data,
            stage,
            out,
        } => train(config.as_deref(), &data, stage, &out)?,
        Command::Eval { run, data, split } => eval(&run, &data, &split)?,
        Command::Predict { run, t1, t2, out } => predict(&run, &t1, &t2, &out)?,
        Command::Ablate {
            config,
            data,
            variants,
            seeds,
            out,
        } => ablate(config.as_deref(), &data, variants.as_deref(), &seeds, &out)?,
        Command::Selftest => selftest()?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Selftest(n)) => {
            eprintln!("selftest: {n} check(s) failed");
            ExitCode::from(EXIT_SELFTEST)
        }
    }
}
