use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aerialformer::data::{
    colorize_mask, ingest_dataset, load_image_rgb, load_mask, make_synthetic, save_png_gray,
    save_png_rgb, write_dataset, Palette,
};
use aerialformer::error::Result;
use aerialformer::metrics::{confusion, metrics, ClassCounts};
use aerialformer::model::{AerialFormer, ModelConfig};
use aerialformer::tiling::{infer_image, make_grid};
use aerialformer::train::{train_loop, TrainConfig};

#[derive(Parser)]
#[command(name = "aerialformer", about = "Aerial image segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a manifest dataset.
    Train {
        /// Model config JSON (or a preset name: t, s, b, toy).
        #[arg(long)]
        config: String,
        /// Dataset manifest (image_path<TAB>mask_path per line).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the loss trace.
        #[arg(long)]
        out: PathBuf,
        /// Palette JSON for RGB masks.
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 6e-5)]
        lr: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Resume from a checkpoint instead of fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tiled inference on one image, writing an id-mask and a color overlay.
    Infer {
        #[arg(long)]
        config: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 512)]
        tile: usize,
        #[arg(long, default_value_t = 256)]
        step: usize,
        /// Output id-mask PNG; a color overlay lands next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Compare predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        palette: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cut one image into overlapping tiles.
    Tile {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        tile: usize,
        #[arg(long)]
        step: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Parameter count for a config, itemized per module.
    Params {
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 16)]
        classes: usize,
        /// Also write the resolved config as JSON.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Generate a synthetic-shapes dataset.
    MakeSynthetic {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(spec: &str, classes: usize) -> Result<ModelConfig> {
    match spec {
        "t" | "s" | "b" => ModelConfig::preset(spec, classes),
        "toy" => ModelConfig::toy(8, 4, [1, 2, 2, 2], classes),
        path => ModelConfig::from_json(std::path::Path::new(path)),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            palette,
            classes,
            lr,
            iterations,
            batch_size,
            seed,
            checkpoint_every,
            checkpoint,
        } => {
            let cfg = load_config(&config, classes)?;
            let model = AerialFormer::new(cfg)?;
            let mut store = model.init_params(seed);
            if let Some(ck) = checkpoint {
                store.load(&ck)?;
            }
            let palette = palette.map(|p| Palette::from_json(&p)).transpose()?;
            let dataset = ingest_dataset(&data, palette.as_ref(), classes)?;
            let tcfg = TrainConfig {
                lr,
                batch_size,
                iterations,
                seed,
                checkpoint_every,
                ..TrainConfig::default()
            };
            let outcome = train_loop(&model, &store, &dataset, &tcfg, Some(&out), |rec| {
                if rec.iteration % 25 == 0 {
                    println!(
                        "iter {:5}  loss {:.4}  pixel-acc {:.4}",
                        rec.iteration, rec.loss, rec.pixel_accuracy
                    );
                }
            })?;
            println!(
                "done: final loss {:.4}, pixel accuracy {:.4}; artifacts in {}",
                outcome.final_loss,
                outcome.final_pixel_accuracy,
                out.display()
            );
        }
        Command::Infer {
            config,
            checkpoint,
            image,
            tile,
            step,
            out,
            classes,
            palette,
        } => {
            let cfg = load_config(&config, classes)?;
            let model = AerialFormer::new(cfg)?;
            let mut store = model.init_params(0);
            store.load(&checkpoint)?;
            let (img, h, w) = load_image_rgb(&image)?;
            let (mask, _) = infer_image(&model, &store, &img, h, w, (tile, tile), (step, step))?;
            save_png_gray(&out, &mask, h, w)?;
            let palette = match palette {
                Some(p) => Palette::from_json(&p)?,
                None => Palette::generate(classes),
            };
            let overlay = out.with_extension("overlay.png");
            save_png_rgb(&overlay, &colorize_mask(&mask, &palette), h, w)?;
            println!("wrote {} and {}", out.display(), overlay.display());
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            classes,
            palette,
            out,
        } => {
            let palette = palette.map(|p| Palette::from_json(&p)).transpose()?;
            let mut names: Vec<_> = std::fs::read_dir(&pred_dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name())
                .filter(|n| n.to_string_lossy().ends_with(".png"))
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(aerialformer::error::AfError::Data {
                    path: pred_dir.display().to_string(),
                    msg: "no .png prediction masks found".into(),
                });
            }
            let mut totals = vec![ClassCounts::default(); classes];
            for name in &names {
                let (pred, ph, pw) = load_mask(&pred_dir.join(name), palette.as_ref())?;
                let (gt, gh, gw) = load_mask(&gt_dir.join(name), palette.as_ref())?;
                if (ph, pw) != (gh, gw) {
                    return Err(aerialformer::error::AfError::Data {
                        path: name.to_string_lossy().into_owned(),
                        msg: format!("pred {ph}x{pw} and gt {gh}x{gw} sizes differ"),
                    });
                }
                for (t, c) in totals
                    .iter_mut()
                    .zip(confusion(&pred, &gt, classes, 255)?)
                {
                    t.tp += c.tp;
                    t.tn += c.tn;
                    t.fp += c.fp;
                    t.fn_ += c.fn_;
                }
            }
            let report = metrics(&totals);
            print!("{}", report.table());
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("report written to {}", path.display());
            }
        }
        Command::Tile {
            image,
            tile,
            step,
            out_dir,
        } => {
            let (img, h, w) = load_image_rgb(&image)?;
            let grid = make_grid(h, w, (tile, tile), (step, step))?;
            std::fs::create_dir_all(&out_dir)?;
            for &(oy, ox) in &grid.origins {
                let (th, tw) = grid.extent((oy, ox));
                let crop = grid.extract(&img, 3, (oy, ox));
                save_png_rgb(&out_dir.join(format!("tile_{oy:05}_{ox:05}.png")), &crop, th, tw)?;
            }
            println!("wrote {} tiles to {}", grid.origins.len(), out_dir.display());
        }
        Command::Params { config, classes, emit } => {
            let cfg = load_config(&config, classes)?;
            if let Some(path) = emit {
                cfg.to_json(&path)?;
                println!("config written to {}", path.display());
            }
            let model = AerialFormer::new(cfg)?;
            let store = model.init_params(0);
            let (total, groups) = model.param_count(&store);
            for (group, n) in &groups {
                println!("{group:>10}: {n:>12} ({:.2}M)", *n as f64 / 1e6);
            }
            println!("{:>10}: {total:>12} ({:.2}M)", "total", total as f64 / 1e6);
        }
        Command::MakeSynthetic {
            n,
            size,
            classes,
            seed,
            out,
        } => {
            let samples = make_synthetic(n, size, classes, seed, 0.08)?;
            write_dataset(&samples, classes, &out)?;
            println!(
                "wrote {n} samples ({size}x{size}, {classes} classes) to {}",
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
