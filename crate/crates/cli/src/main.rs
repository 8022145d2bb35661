use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bncodec::codec::bitstream::Header;
use bncodec::codec::Codec;
use bncodec::complexity::pipeline_report;
use bncodec::control::{LEVELS, QUALITIES};
use bncodec::data::{image_to_tensor, ingest_dataset, synthetic_corpus, tensor_to_image, training_image, CropSampler};
use bncodec::eval::harness::{ar_variant_harness, HarnessConfig, Ordering};
use bncodec::eval::{evaluate_image, EvalRow};
use bncodec::model::{bundle_path, load_for_quality};
use bncodec::training::{run_stage, start_training, TrainConfig, Trainer};
use bncodec::{ControllerState, Model, Task};
use candle_core::Device;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod plot;

#[derive(Parser)]
#[command(name = "bncodec", version, about = "Learned image codec with budget-controlled structure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress an image to a `.abc` stream.
    Compress {
        /// Model file or bundle directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Complexity level, 0 (widest) to 7 (narrowest).
        #[arg(long, alias = "budget", default_value_t = 0)]
        budget_level: usize,
        #[arg(long, default_value = "psnr")]
        task: Task,
        #[arg(long, default_value_t = 0)]
        quality: usize,
        /// Let the control branch adapt the structure to the image.
        #[arg(long)]
        data_adaptive: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decompress a `.abc` stream to PNG.
    Decompress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Checkpoint to continue from, or to fine-tune at another quality.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint to write; defaults to `output` in the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Append every step's loss terms here as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Per-edge MAC table of one level as CSV.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        level: usize,
        #[arg(long, default_value_t = 0)]
        quality: usize,
        /// Image size `HxW`.
        #[arg(long, default_value = "256x256")]
        size: String,
    },
    /// Rate, distortion and complexity of every image at every level.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Image folder or file, or `synthetic[:count[:size]]`.
        #[arg(long)]
        dataset: String,
        /// `a..b` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "0..7")]
        levels: String,
        /// Qualities to evaluate; all present in a bundle by default.
        #[arg(long, value_delimiter = ',')]
        quality: Vec<usize>,
        #[arg(long, default_value = "psnr")]
        task: Task,
        #[arg(long)]
        data_adaptive: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tunes the context path of a trained model under each standard
    /// decoding order and tabulates the coded rates.
    Harness {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        quality: usize,
        /// Training crops: an image folder or file; procedural images by default.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        crops: usize,
        #[arg(long, default_value_t = 128)]
        crop: u32,
        /// Evaluation images, as for `eval`.
        #[arg(long, default_value = "synthetic:12:128")]
        dataset: String,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rate-distortion plot of an `eval` CSV, with the averaged points as CSV.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let device = Device::Cpu;
    match Cli::parse().command {
        Command::Compress { model, input, output, budget_level, task, quality, data_adaptive, seed } => {
            let model = load_for_quality(&model, quality, &device)?;
            let img = image::open(&input).with_context(|| format!("reading {}", input.display()))?.to_rgb8();
            let x = image_to_tensor(&img, &device)?;
            let controller = ControllerState::new(budget_level, task, quality, data_adaptive)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bytes = Codec::new(&model).compress_bytes(&x, &controller, &mut rng)?;
            std::fs::write(&output, &bytes)?;
            let bpp = (bytes.len() * 8) as f64 / (img.width() * img.height()) as f64;
            log::info!("{} bytes, {bpp:.4} bpp", bytes.len());
        }
        Command::Decompress { model, input, output } => {
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let model = load_for_quality(&model, Header::peek_quality(&bytes)?, &device)?;
            let decoded = Codec::new(&model).decompress_bytes(&bytes)?;
            tensor_to_image(&decoded.image)?.save(&output)?;
        }
        Command::Train { config, stage, resume, output, log } => train(&config, stage, resume, output, log, &device)?,
        Command::Report { model, level, quality, size } => {
            let model = load_for_quality(&model, quality, &device)?;
            let (h, w) = parse_size(&size)?;
            let structure = model.non_adaptive_structure(level)?;
            let (ph, pw) = (h.div_ceil(64) * 64, w.div_ceil(64) * 64);
            let report = pipeline_report(&model, &structure, ph, pw)?;
            let mut out = csv::Writer::from_writer(std::io::stdout());
            out.write_record(["edge", "variant", "macs"])?;
            for (edge, macs) in &report.per_edge {
                out.write_record([edge.to_string(), structure.choice(*edge).to_string(), macs.to_string()])?;
            }
            out.write_record(["context".to_string(), String::new(), report.context.to_string()])?;
            out.write_record(["total".to_string(), String::new(), report.total.to_string()])?;
            out.flush()?;
        }
        Command::Eval { model, dataset, levels, quality, task, data_adaptive, out } => {
            let levels = parse_levels(&levels)?;
            let qualities = if !quality.is_empty() {
                quality
            } else if model.is_dir() {
                (0..QUALITIES).filter(|&q| bundle_path(&model, q).exists()).collect()
            } else {
                vec![Model::load(&model, &device)?.state.quality]
            };
            let images = load_images(&dataset)?;
            if images.is_empty() {
                bail!("dataset `{dataset}` has no images");
            }
            let mut writer = csv::Writer::from_path(&out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for q in qualities {
                let m = load_for_quality(&model, q, &device)?;
                for (name, img) in &images {
                    for row in evaluate_image(&m, name, img, &levels, task, data_adaptive, &mut rng)? {
                        writer.serialize(&row)?;
                    }
                }
                log::info!("quality {q} done");
            }
            writer.flush()?;
        }
        Command::Harness { model, quality, train, crops, crop, dataset, steps, batch, seed, out } => {
            let backbone = load_for_quality(&model, quality, &device)?;
            let mut sampler = match train {
                Some(dir) => CropSampler::from_folder(dir, crop, seed)?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    CropSampler::new((0..64).map(|_| training_image(crop, &mut rng)).collect(), crop, seed)?
                }
            };
            let train = sampler.batch(crops, &device)?;
            let eval = load_images(&dataset)?
                .iter()
                .map(|(_, img)| image_to_tensor(img, &device))
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = HarnessConfig { steps, batch, seed, ..HarnessConfig::default() };
            let rows = ar_variant_harness(&backbone, &Ordering::STANDARD, &train, &eval, &cfg)?;
            let mut writer = csv::Writer::from_path(&out)?;
            writer.write_record(["name", "stages", "groups", "decode_stages", "bpp", "psnr", "train_bpp", "tile"])?;
            for r in &rows {
                let tile: String = r.tile.iter().map(|t| char::from_digit(*t as u32, 16).unwrap()).collect();
                writer.write_record([
                    r.name.clone(),
                    r.stages.to_string(),
                    r.groups.to_string(),
                    r.decode_stages.to_string(),
                    format!("{:.6}", r.bpp),
                    format!("{:.4}", r.psnr),
                    format!("{:.6}", r.train_bpp),
                    tile,
                ])?;
            }
            writer.flush()?;
        }
        Command::Plot { input, out } => {
            let rows: Vec<EvalRow> = csv::Reader::from_path(&input)?.deserialize().collect::<Result<_, _>>()?;
            let points = plot::draw(&rows, &out)?;
            let mut writer = csv::Writer::from_path(out.with_extension("csv"))?;
            for p in points {
                writer.serialize(p)?;
            }
            writer.flush()?;
        }
    }
    Ok(())
}

fn train(
    config: &Path,
    stage: u8,
    resume: Option<PathBuf>,
    output: Option<PathBuf>,
    log_path: Option<PathBuf>,
    device: &Device,
) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let output = output.or_else(|| cfg.output.clone()).context("no output checkpoint given")?;
    let model = start_training(&cfg, resume.as_deref(), device)?;
    let mut sampler = match &cfg.data {
        Some(dir) => CropSampler::from_folder(dir, cfg.schedule.crop, cfg.seed ^ stage as u64)?,
        None => CropSampler::new(Vec::new(), cfg.schedule.crop, cfg.seed ^ stage as u64)?,
    };
    let seed = cfg.seed.wrapping_mul(31).wrapping_add(stage as u64 + 7 * cfg.quality as u64);
    let mut trainer = Trainer::new(model, cfg.schedule.clone(), seed)?;
    let mut log_file = match log_path {
        Some(p) => Some(BufWriter::new(File::options().create(true).append(true).open(p)?)),
        None => None,
    };
    let every = cfg.schedule.log_every.max(1);
    let mut window = Vec::with_capacity(every);
    let mut io_error = None;
    run_stage(&mut trainer, &mut sampler, stage, Some(&output), |r| {
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = serde_json::to_writer(&mut *f, r).map_err(std::io::Error::from).and_then(|_| writeln!(f)) {
                io_error.get_or_insert(e);
            }
        }
        window.push(r.clone());
        if window.len() == every {
            let n = window.len() as f64;
            let mean = |f: fn(&bncodec::training::RdcRecord) -> f64| window.iter().map(f).sum::<f64>() / n;
            log::info!(
                "stage {} step {}: loss {:.4} bpp {:.4} distortion {:.3} complexity {:.3} ratio {:.3}",
                r.stage,
                r.step + 1,
                mean(|r| r.total),
                mean(|r| r.rate),
                mean(|r| r.distortion),
                mean(|r| r.complexity),
                mean(|r| r.rd_ratio),
            );
            window.clear();
        }
    })?;
    if let Some(e) = io_error {
        log::warn!("training log incomplete: {e}");
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    if stage == 2 {
        let model = trainer.into_model();
        for level in 0..LEVELS {
            let s = model.non_adaptive_structure(level)?;
            log::info!("level {level}: {:?} cost {:.0}", s.inter.values().collect::<Vec<_>>(), model.cost(&s.inter)?);
        }
    }
    log::info!("saved {}", output.display());
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X']).context("size must be HxW")?;
    let (h, w): (usize, usize) = (h.trim().parse()?, w.trim().parse()?);
    if h == 0 || w == 0 {
        bail!("size must be positive");
    }
    Ok((h, w))
}

fn parse_levels(s: &str) -> Result<Vec<usize>> {
    let levels: Vec<usize> = match s.split_once("..") {
        Some((a, b)) => (a.trim().parse()?..=b.trim().parse()?).collect(),
        None => s.split(',').map(|v| v.trim().parse()).collect::<Result<_, _>>()?,
    };
    if levels.is_empty() || levels.iter().any(|&l| l >= LEVELS) {
        bail!("levels must be nonempty and within 0..{}", LEVELS - 1);
    }
    Ok(levels)
}

fn load_images(spec: &str) -> Result<Vec<(String, image::RgbImage)>> {
    if let Some(rest) = spec.strip_prefix("synthetic") {
        let mut parts = rest.trim_start_matches(':').split(':').filter(|p| !p.is_empty());
        let count = parts.next().map_or(Ok(24), str::parse)?;
        let size = parts.next().map_or(Ok(64), str::parse)?;
        return Ok(synthetic_corpus(7, count, size));
    }
    Ok(ingest_dataset(spec)?.collect())
}
