use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use eyenet_core::checkpoint;
use eyenet_core::data::{self, augment_to_count, load_dataset, resize_sample};
use eyenet_core::infer::{self, InferOptions, Model, SIDECAR_CONFIG};
use eyenet_core::metrics::ConfusionMatrix;
use eyenet_core::postproc::clean_mask;
use eyenet_core::{Error, Evaluator, Result, RunConfig, Sample, TrainState, Trainer};

/// Environment variable holding the log filter (`error`, `warn`, `info`, `debug`, ...).
const LOG_ENV: &str = "EYENET_LOG";

#[derive(Parser)]
#[command(
    name = "eyenet",
    version,
    about = "Eye-region segmentation: train, infer, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write checkpoints to the output directory.
    Train {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        val_images: PathBuf,
        #[arg(long)]
        val_masks: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from last.ckpt and state.toml in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score predicted masks against ground truth, paired by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        per_image: bool,
    },
    /// Segment an image or a directory of images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clean up the predicted masks.
        #[arg(long)]
        postproc: bool,
        /// Also write a side-by-side overlay for each image.
        #[arg(long)]
        composite: bool,
    },
    /// Clean up a directory of label masks.
    Postproc {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter count and tensor shapes of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train {
            images,
            masks,
            val_images,
            val_masks,
            config,
            out,
            resume,
        } => train(
            &images,
            &masks,
            &val_images,
            &val_masks,
            &config,
            &out,
            resume,
        ),
        Command::Eval {
            pred,
            truth,
            per_image,
        } => eval(&pred, &truth, per_image),
        Command::Infer {
            checkpoint,
            input,
            out,
            postproc,
            composite,
        } => run_infer(&checkpoint, &input, &out, postproc, composite),
        Command::Postproc { input, out } => postproc(&input, &out),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn prepare(samples: Vec<Sample>, cfg: &RunConfig) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| resize_sample(s, cfg.train.resize_height, cfg.train.resize_width))
        .collect()
}

fn train(
    images: &Path,
    masks: &Path,
    val_images: &Path,
    val_masks: &Path,
    config: &Path,
    out: &Path,
    resume: bool,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut train_set = prepare(load_dataset(images, masks)?, &cfg)?;
    let val_set = prepare(load_dataset(val_images, val_masks)?, &cfg)?;
    if let Some(n) = cfg.augment_to {
        train_set = augment_to_count(&train_set, n, &cfg.augment)?;
    }
    info!(
        "{} training and {} validation samples at {}x{}, {} parameters",
        train_set.len(),
        val_set.len(),
        cfg.train.resize_width,
        cfg.train.resize_height,
        cfg.network.parameter_count()
    );
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;

    let mut trainer = if resume {
        let params = checkpoint::load_for_spec(out.join("last.ckpt"), &cfg.network)?;
        let state_path = out.join("state.toml");
        let text = fs::read_to_string(&state_path).map_err(|e| Error::file(&state_path, e))?;
        let state = TrainState::from_toml(&text)?;
        info!("resuming at epoch {}", state.epoch);
        Trainer::resume(cfg.network.clone(), cfg.train.clone(), params, state)?
    } else {
        Trainer::new(cfg.network.clone(), cfg.train.clone())?
    };
    write(&out.join(SIDECAR_CONFIG), &cfg.to_text())?;

    trainer.fit(&train_set, &val_set, |t, record| {
        checkpoint::save(&t.params, out.join("last.ckpt"))?;
        write(&out.join("state.toml"), &t.state.to_toml())?;
        if t.state.epochs_since_improve == 0 {
            checkpoint::save(&t.params, out.join("best.ckpt"))?;
        }
        let mut csv = String::from("epoch,train_loss,val_loss,val_miou,lr\n");
        for r in &t.state.history {
            csv += &format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_miou, r.lr
            );
        }
        write(&out.join("history.csv"), &csv)?;
        println!(
            "epoch {:>3}  train {:.5}  val {:.5}  miou {:.4}  lr {:e}",
            record.epoch, record.train_loss, record.val_loss, record.val_miou, record.lr
        );
        Ok(())
    })?;
    let s = &trainer.state;
    println!(
        "epochs {}  steps {}  best val loss {:.6}  lr {:e}",
        s.epoch, s.step, s.best_val_loss, s.current_lr
    );
    if let Some(last) = s.history.last() {
        println!(
            "last epoch: train loss {:.6}  val loss {:.6}  val MIOU {:.4}",
            last.train_loss, last.val_loss, last.val_miou
        );
    }
    Ok(())
}

fn eval(pred: &Path, truth: &Path, per_image: bool) -> Result<()> {
    let preds = data::stems(pred)?;
    let truths = data::stems(truth)?;
    let missing: Vec<&str> = truths
        .keys()
        .filter(|k| !preds.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no prediction for: {}",
            missing.join(", ")
        )));
    }
    if truths.is_empty() {
        return Err(Error::Data(format!(
            "no masks found in {}",
            truth.display()
        )));
    }
    let mut ev = Evaluator::new();
    for (id, tpath) in &truths {
        let t = data::read_mask(tpath)?;
        let p = data::read_mask(&preds[id])?;
        let cm: ConfusionMatrix = ev.add(&p, &t).map_err(|e| Error::file(&preds[id], e))?;
        if per_image {
            println!(
                "{id}\tmiou={:.6}\tpixel_accuracy={:.6}",
                cm.miou()?,
                cm.pixel_accuracy()?
            );
        }
    }
    let extra = preds.keys().filter(|k| !truths.contains_key(*k)).count();
    if extra > 0 {
        warn!("{extra} predictions have no ground truth and were skipped");
    }
    print!("{}", ev.report()?);
    Ok(())
}

fn run_infer(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    postproc: bool,
    composite: bool,
) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let (height, width) = model
        .input_size
        .unwrap_or((data::TARGET_HEIGHT, data::TARGET_WIDTH));
    let opts = InferOptions {
        height,
        width,
        postproc,
        composite,
    };
    let summary = infer::infer_paths(&model, input, out, &opts)?;
    println!(
        "wrote {} files, {} inputs failed",
        summary.written.len(),
        summary.failures.len()
    );
    for (path, e) in &summary.failures {
        eprintln!("{}: {e}", path.display());
    }
    match summary.failures.into_iter().next() {
        None => Ok(()),
        Some((_, e)) => Err(e),
    }
}

fn postproc(input: &Path, out: &Path) -> Result<()> {
    let masks = data::stems(input)?;
    if masks.is_empty() {
        return Err(Error::Data(format!(
            "no masks found in {}",
            input.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let mut failed = None;
    for (id, path) in &masks {
        let res = data::read_mask(path)
            .and_then(|m| clean_mask(&m))
            .and_then(|m| data::write_mask(&m, &out.join(format!("{id}.png"))));
        if let Err(e) = res {
            warn!("{}: {e}", path.display());
            failed.get_or_insert(Error::file(path, e));
        }
    }
    println!("cleaned {} masks", masks.len());
    failed.map_or(Ok(()), Err)
}

fn inspect(path: &Path) -> Result<()> {
    let store = checkpoint::load(path)?;
    println!("parameters {}", store.parameter_count());
    println!("tensors {}", store.len());
    println!("step {}", store.step());
    for (name, e) in store.iter() {
        println!("{name}\t{}", e.value.dims());
    }
    Ok(())
}
