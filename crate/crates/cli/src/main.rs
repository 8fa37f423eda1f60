use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::RgbImage;

use posegen_core::data::{
    attribute_index, encode_keypoints_to_heatmap, load_dataset, load_sample, write_dataset, ImageTensor, Keypoints,
    SemanticLabelMap, ToyDataset, ATTRIBUTE_NAMES,
};
use posegen_core::evaluation::evaluate_folder;
use posegen_core::training::{
    output_image, train_generator, train_parsing, Checkpoint, RunOptions, Synthesizer, TargetParsing, TrainConfig,
};
use posegen_core::{Error, Result};

/// Pose-guided person image synthesis on a synthetic toy domain.
///
/// Log verbosity follows `POSEGEN_LOG` (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "posegen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
    },
    /// Train the target-parsing network.
    TrainParsing {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the generator and discriminator.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Parsing checkpoint the generator will be paired with at inference.
        #[arg(long)]
        parsing_ckpt: Option<PathBuf>,
    },
    /// Render a source person in a target pose.
    Synthesize {
        #[command(flatten)]
        models: ModelArgs,
        /// Source image inside a dataset layout (`<root>/images/<stem>.png`).
        #[arg(long)]
        source: PathBuf,
        /// Pose JSON with 18 joints.
        #[arg(long)]
        target_pose: PathBuf,
        /// Use this label PNG as the target parse instead of predicting one.
        #[arg(long)]
        target_parse: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace one attribute of the source person with the donor's.
    Swap {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        donor: PathBuf,
        /// Attribute name, for example `upper_clothes`.
        #[arg(long)]
        attribute: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the row-softmaxed correspondence matrix and a heat grid of selected rows.
    DumpCorrespondence {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target_pose: PathBuf,
        #[arg(long)]
        target_parse: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated PNGs against same-named targets.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Config override `dotted.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    gen_ckpt: PathBuf,
    #[arg(long)]
    parsing_ckpt: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Image(_) => 1,
        Error::InvalidInput(_) | Error::Config(_) | Error::Checkpoint(_) | Error::Json(_) => 2,
        Error::Divergence { .. } | Error::Tensor(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POSEGEN_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            seed,
            count,
            out,
            height,
            width,
            classes,
        } => {
            let pairs = ToyDataset::generate(seed, count, height, width, classes)?;
            let entries = write_dataset(&out, &pairs)?;
            println!("wrote {} pairs to {}", entries.len(), out.display());
        }
        Command::TrainParsing { run } => {
            let cfg = resolve_config(&run)?;
            let pairs = load_dataset(&run.data)?;
            let resume = run.resume.as_deref().map(Checkpoint::load).transpose()?;
            prepare_out(&run.out, &cfg)?;
            let out = train_parsing(&pairs, &cfg, RunOptions { out_dir: Some(&run.out), resume: resume.as_ref() })?;
            report_training(&out.written, out.steps.last().map(|s| &s.losses));
        }
        Command::Train { run, parsing_ckpt } => {
            let cfg = resolve_config(&run)?;
            let parsing = match (&parsing_ckpt, cfg.ablations.use_parsing) {
                (Some(p), _) => Some(Checkpoint::load(p)?),
                (None, true) => {
                    return Err(Error::config(
                        "--parsing-ckpt is required when ablations.use_parsing is true",
                    ))
                }
                (None, false) => None,
            };
            let pairs = load_dataset(&run.data)?;
            let resume = run.resume.as_deref().map(Checkpoint::load).transpose()?;
            prepare_out(&run.out, &cfg)?;
            let out = train_generator(
                &pairs,
                &cfg,
                parsing.as_ref(),
                RunOptions { out_dir: Some(&run.out), resume: resume.as_ref() },
            )?;
            report_training(&out.written, out.steps.last().map(|s| &s.losses));
        }
        Command::Synthesize {
            models,
            source,
            target_pose,
            target_parse,
            out,
        } => {
            let syn = load_models(&models)?;
            let src = load_sample(&source)?;
            let pose = read_pose(&target_pose)?;
            let parse = target_parse.as_deref().map(read_parse).transpose()?;
            let how = parse.as_ref().map_or(TargetParsing::Predicted, TargetParsing::Given);
            let img = output_image(&syn.pose_transfer(&src, &pose, how)?)?;
            let (h, w) = syn.resolution();
            let panel = pose_panel(&pose, h, w)?;
            write_outputs(&out, &img, [&src.image.to_rgb8(), &panel, &img.to_rgb8()])?;
        }
        Command::Swap {
            models,
            source,
            donor,
            attribute,
            out,
        } => {
            let index = attribute_index(&attribute).ok_or_else(|| {
                Error::invalid(format!("unknown attribute `{attribute}`; valid names: {}", ATTRIBUTE_NAMES.join(", ")))
            })?;
            let syn = load_models(&models)?;
            let src = load_sample(&source)?;
            let don = load_sample(&donor)?;
            let img = output_image(&syn.clothing_transfer(&src, &don, index, TargetParsing::Predicted)?)?;
            write_outputs(&out, &img, [&src.image.to_rgb8(), &don.image.to_rgb8(), &img.to_rgb8()])?;
        }
        Command::DumpCorrespondence {
            models,
            source,
            target_pose,
            target_parse,
            out,
        } => {
            let syn = load_models(&models)?;
            let src = load_sample(&source)?;
            let pose = read_pose(&target_pose)?;
            let parse = target_parse.as_deref().map(read_parse).transpose()?;
            let how = parse.as_ref().map_or(TargetParsing::Predicted, TargetParsing::Given);
            let c = syn.correspondence(&src, &pose, how)?;
            let rows = syn.attention(&c)?;
            dump_correspondence(&out, &rows.get(0)?, c.grid())?;
        }
        Command::Evaluate { generated, targets, out } => {
            let report = evaluate_folder(&generated, &targets)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            std::fs::write(&out, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&out, e))?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn resolve_config(run: &RunArgs) -> Result<TrainConfig> {
    let base = match &run.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    base.with_overrides(&run.overrides)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Creates the output directory and records the resolved config in it.
fn prepare_out(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::io(&path, e))
}

fn report_training(written: &[PathBuf], last: Option<&std::collections::BTreeMap<String, f64>>) {
    if let Some(last) = last {
        let terms: Vec<String> = last.iter().map(|(k, v)| format!("{k}={v:.5}")).collect();
        println!("final step: {}", terms.join(" "));
    }
    if let Some(p) = written.last() {
        println!("checkpoint: {}", p.display());
    }
}

fn load_models(m: &ModelArgs) -> Result<Synthesizer> {
    let gen = Checkpoint::load(&m.gen_ckpt)?;
    let parsing = m.parsing_ckpt.as_deref().map(Checkpoint::load).transpose()?;
    Synthesizer::from_checkpoints(&gen, parsing.as_ref())
}

fn read_pose(path: &Path) -> Result<Keypoints> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Keypoints::from_json(&text)
}

fn read_parse(path: &Path) -> Result<SemanticLabelMap> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    SemanticLabelMap::from_gray8(&img.to_luma8())
}

/// Gray rendering of the strongest joint response at each pixel.
fn pose_panel(pose: &Keypoints, h: usize, w: usize) -> Result<RgbImage> {
    let heat = encode_keypoints_to_heatmap(pose, h, w, 1.5)?;
    let joints = heat.data().len() / (h * w);
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (0..joints).map(|j| heat.get(j, y as usize, x as usize)).fold(0.0f32, f32::max);
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([g, g, g])
    }))
}

/// Panels side by side in one row.
fn grid(panels: &[&RgbImage]) -> RgbImage {
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let w: u32 = panels.iter().map(|p| p.width()).sum();
    let mut out = RgbImage::new(w, h);
    let mut x0 = 0;
    for p in panels {
        for (x, y, px) in p.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += p.width();
    }
    out
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

/// Writes `out` and `<stem>_grid.png` next to it.
fn write_outputs(out: &Path, img: &ImageTensor, panels: [&RgbImage; 3]) -> Result<()> {
    save_png(&img.to_rgb8(), out)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    let grid_path = out.with_file_name(format!("{stem}_grid.png"));
    save_png(&grid(&panels), &grid_path)?;
    println!("wrote {} and {}", out.display(), grid_path.display());
    Ok(())
}

/// Upscale factor for each row tile in the heat grid.
const HEAT_SCALE: u32 = 16;
const HEAT_ROWS: usize = 4;

fn dump_correspondence(dir: &Path, rows: &candle_core::Tensor, (h, w): (usize, usize)) -> Result<()> {
    create_dir(dir)?;
    let data: Vec<f32> = rows.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    let n = h * w;
    if data.len() != n * n {
        return Err(Error::invalid(format!("correspondence has {} entries, expected {}", data.len(), n * n)));
    }
    let bin = dir.join("correspondence.bin");
    let mut f = std::fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    for v in &data {
        f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
    }
    let header = dir.join("correspondence.json");
    std::fs::write(&header, serde_json::json!({ "h": h, "w": w }).to_string()).map_err(|e| Error::io(&header, e))?;

    let picks: Vec<usize> = (0..HEAT_ROWS.min(n)).map(|i| i * n / HEAT_ROWS.min(n)).collect();
    let tiles: Vec<RgbImage> = picks
        .iter()
        .map(|&r| {
            let row = &data[r * n..(r + 1) * n];
            let peak = row.iter().cloned().fold(f32::MIN_POSITIVE, f32::max);
            RgbImage::from_fn(w as u32 * HEAT_SCALE, h as u32 * HEAT_SCALE, |x, y| {
                let v = row[(y / HEAT_SCALE) as usize * w + (x / HEAT_SCALE) as usize] / peak;
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                image::Rgb([g, g / 2, 255 - g])
            })
        })
        .collect();
    let refs: Vec<&RgbImage> = tiles.iter().collect();
    save_png(&grid(&refs), &dir.join("correspondence.png"))?;
    println!("wrote {}x{} correspondence to {}", n, n, dir.display());
    Ok(())
}
