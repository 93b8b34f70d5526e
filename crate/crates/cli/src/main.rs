mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vgan3d::config::RunConfig;
use vgan3d::data::{
    load_dataset, load_volume, phantom_generate, read_labels, save_case, write_labels, zscore,
    Case, LabelVolume, PhantomSpec,
};
use vgan3d::metrics::evaluate_case;
use vgan3d::training::{train, Checkpoint, Models, Sample, TrainLog, Trainer};
use vgan3d::Error;

/// Config file written next to the checkpoints of a training run.
const CONFIG_FILE: &str = "config.json";

#[derive(Parser)]
#[command(
    name = "vgan3d",
    version,
    about = "Adversarial volumetric segmentation with CRF refinement"
)]
struct Cli {
    /// Overrides the configured seed (train.seed; phantom generation seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Computation is single-threaded, so any value gives
    /// identical results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Records zero wall-clock seconds so logs are byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic multimodal cases in dataset layout.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Trains generator, CRF and discriminator on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root; overrides data.dir.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.alpha.
        #[arg(long)]
        alpha: Option<f64>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segments one case directory and writes the labels as MVOL.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Case directory holding t1, t1c, t2 and flair volumes.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Defaults to config.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Uses the generator alone (argmax of softmaxed scores).
        #[arg(long)]
        no_crf: bool,
    },
    /// Compares predicted and reference label volumes.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Turns a training log into a tidy CSV and loss / Dice plots.
    Curves {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Contract(_) | Error::Shape { .. } => 1,
        Error::Io { .. } | Error::Format { .. } | Error::Data { .. } => 2,
        Error::Numeric { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Phantom { out, count, size } => phantom(&out, count, size, cli.seed.unwrap_or(0)),
        Command::Train {
            config,
            data,
            out,
            alpha,
            epochs,
        } => {
            let mut c = match config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            if let Some(dir) = data {
                c.data.dir = Some(dir.to_string_lossy().into_owned());
            }
            if let Some(a) = alpha {
                c.train.alpha = a;
            }
            if let Some(e) = epochs {
                c.train.epochs = e;
            }
            if let Some(s) = cli.seed {
                c.train.seed = s;
            }
            c.validate()?;
            train_run(&c, &out, cli.deterministic)
        }
        Command::Infer {
            checkpoint,
            input,
            output,
            config,
            no_crf,
        } => {
            let config = config.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(CONFIG_FILE)
            });
            infer(
                &RunConfig::load(config)?,
                &checkpoint,
                &input,
                &output,
                !no_crf,
            )
        }
        Command::Evaluate {
            pred,
            truth,
            report,
        } => evaluate(&pred, &truth, &report),
        Command::Curves { log, out } => curves(&log, &out),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn phantom(out: &Path, count: usize, size: usize, seed: u64) -> Result<(), Error> {
    if count == 0 {
        return Err(Error::Config {
            key: "count".into(),
            message: "must be at least 1".into(),
        });
    }
    let cases = phantom_generate(&PhantomSpec::new(size, count, seed))?;
    create_dir(out)?;
    for (volume, labels) in cases {
        let dir = save_case(out, &Case { volume, labels })?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn train_run(c: &RunConfig, out: &Path, deterministic: bool) -> Result<(), Error> {
    let Some(dir) = c.data.dir.as_deref() else {
        return Err(Error::Config {
            key: "data.dir".into(),
            message: "no dataset directory given".into(),
        });
    };
    if !Path::new(dir).is_dir() {
        return Err(Error::Config {
            key: "data.dir".into(),
            message: format!("{dir} is not a directory"),
        });
    }
    let samples = load_dataset(dir)?
        .iter()
        .map(Sample::<f32>::from_case)
        .collect::<Result<Vec<_>, _>>()?;
    let models = Models::new(
        c.generator,
        c.discriminator.clone(),
        c.crf.clone(),
        c.train.seed,
    )?;
    let mut trainer = Trainer::new(models, samples, c.train.clone(), c.hash())?;
    trainer.record_time = !deterministic;
    create_dir(out)?;
    c.save(out.join(CONFIG_FILE))?;
    eprintln!(
        "training on {} cases, validating on {}",
        trainer.train_ids().len(),
        trainer.val_ids().len()
    );
    train(&mut trainer, Some(out))
}

fn infer(
    c: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    use_crf: bool,
) -> Result<(), Error> {
    let ck = Checkpoint::<f32>::load(checkpoint, Some(c.hash()))?;
    let mut models = Models::new(
        c.generator,
        c.discriminator.clone(),
        c.crf.clone(),
        c.train.seed,
    )?;
    models.restore(&ck)?;
    let volume = load_volume(input)?;
    let image = zscore(&volume).to_tensor::<f32>();
    let beliefs = models.segment(&image, use_crf)?;
    let labels = LabelVolume::from_channels(&beliefs)?;
    write_labels(output, &labels, volume.spacing)
}

fn evaluate(pred: &Path, truth: &Path, report: &Path) -> Result<(), Error> {
    let (p, _) = read_labels(pred)?;
    let (t, spacing) = read_labels(truth)?;
    if p.extents != t.extents {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: p.extents.to_vec(),
            rhs: t.extents.to_vec(),
        });
    }
    let case_id = truth
        .parent()
        .and_then(|d| d.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    let r = evaluate_case(&case_id, &p, &t, spacing.map(f64::from))?;
    let json = r.to_json();
    write(report, &json)?;
    println!("{json}");
    Ok(())
}

const SERIES: [(&str, [u8; 3]); 5] = [
    ("loss_g", [200, 40, 40]),
    ("loss_d", [40, 90, 200]),
    ("gdl", [40, 150, 60]),
    ("dice_train", [200, 40, 40]),
    ("dice_val", [40, 90, 200]),
];

fn curves(log: &Path, out: &Path) -> Result<(), Error> {
    let text = std::fs::read_to_string(log).map_err(|e| Error::Io {
        path: log.to_path_buf(),
        source: e,
    })?;
    let log = TrainLog::from_csv(&text)?;
    let mut points: Vec<Vec<(f64, f64)>> = vec![Vec::new(); SERIES.len()];
    let mut tidy = String::from("epoch,series,value\n");
    for r in log.rows() {
        let values = [
            Some(r.loss_g),
            Some(r.loss_d),
            Some(r.gdl),
            Some(r.dice_train),
            r.dice_val,
        ];
        for (k, value) in values.into_iter().enumerate() {
            if let Some(v) = value {
                writeln!(tidy, "{},{},{v:.9}", r.epoch, SERIES[k].0).expect("string write");
                points[k].push((r.epoch as f64, v));
            }
        }
    }
    create_dir(out)?;
    write(&out.join("curves.csv"), tidy)?;
    let panel = |range: std::ops::Range<usize>| {
        let series: Vec<plot::Series> = range
            .map(|k| plot::Series {
                color: SERIES[k].1,
                points: &points[k],
            })
            .collect();
        plot::render(&series)
    };
    write(&out.join("loss.ppm"), panel(0..3))?;
    write(&out.join("dice.ppm"), panel(3..5))?;
    Ok(())
}
