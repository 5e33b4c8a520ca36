//! Command-line surface: dataset synthesis, training, transfer, evaluation,
//! inference, latency benchmarking, and overlay rendering. Exit codes: 0 on
//! success, 1 on domain errors (message names the failing validation), 2 on
//! usage errors.

pub mod overlay;

use std::error::Error;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{benchmark, BenchConfig};
use crate::codec::CodecConfig;
use crate::evaluator::{evaluate, EvalConfig};
use crate::harness::{
    infer_split, save_detections, train, transfer, Normalizer, TrainConfig,
};
use crate::image::GrayImage;
use crate::netcore::{DetectorModel, ModelConfig};
use crate::synthgen::{
    generate_dataset, load_dataset_info, load_manifest, Family, Split, SynthConfig,
};

#[derive(Parser)]
#[command(name = "semdet", version, about = "Anchorless defect detection on synthetic SEM line-space images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Adi,
    Aei,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Family {
        match f {
            FamilyArg::Adi => Family::Adi,
            FamilyArg::Aei => Family::Aei,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    /// 10% of the full image counts, family defaults.
    Desk,
    /// Full-scale image counts.
    Full,
    /// Tiny low-noise two-class dataset for end-to-end checks.
    Easy,
}

#[derive(Args)]
struct CommonTrainArgs {
    /// Dataset root (as written by `synth`)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training epochs (default: 200 fresh, 100 transfer)
    #[arg(long)]
    epochs: Option<u64>,
    /// Validation cadence in epochs (default: 10 fresh, 4 transfer)
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Confidence threshold for validation metrics
    #[arg(long, default_value_t = 0.33)]
    conf_thr: f32,
    /// Detection candidates kept per image
    #[arg(long, default_value_t = 100)]
    topk: usize,
    /// Pixels per prediction cell; must match the architecture
    #[arg(long, default_value_t = 4)]
    stride: usize,
    /// Disable horizontal-flip augmentation
    #[arg(long)]
    no_flip: bool,
    /// Channels of the stride-2 downsampling stages, e.g. 16,32,64,64
    #[arg(long, value_delimiter = ',')]
    down_channels: Option<Vec<usize>>,
    /// Channels of the upsampling stages, e.g. 64,32
    #[arg(long, value_delimiter = ',')]
    up_channels: Option<Vec<usize>>,
    /// Hidden width of each prediction head
    #[arg(long)]
    head_channels: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Checkpoint to load
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.33)]
    conf_thr: f32,
    #[arg(long, default_value_t = 100)]
    topk: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic line-space defect dataset
    Synth {
        #[arg(long, value_enum, default_value_t = FamilyArg::Aei)]
        family: FamilyArg,
        /// Dataset root to create
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Size preset; `easy` ignores --family
        #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
        preset: PresetArg,
    },
    /// Train a detector from scratch
    Train {
        #[command(flatten)]
        common: CommonTrainArgs,
        /// Warm-start checkpoint (name/shape-matched copy)
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
    },
    /// Fine-tune from a source checkpoint at transfer cadence
    Transfer {
        #[command(flatten)]
        common: CommonTrainArgs,
        /// Source checkpoint to fine-tune from
        #[arg(long)]
        init_ckpt: PathBuf,
    },
    /// Score a checkpoint on a split and emit the AP table as CSV
    Eval {
        #[command(flatten)]
        score: ScoreArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Directory for eval.csv/eval.json (default: print CSV to stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint over a split and write detections as JSON lines
    Infer {
        #[command(flatten)]
        score: ScoreArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Directory for detections.jsonl
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure per-image inference latency on a split
    Bench {
        #[command(flatten)]
        score: ScoreArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        /// Unmeasured warmup iterations
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Images per timed pass (minimum 30)
        #[arg(long, default_value_t = 30)]
        n_images: usize,
        /// Timed passes
        #[arg(long, default_value_t = 2)]
        repeat: usize,
        /// Directory for bench.json (default: table to stdout only)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a side-by-side prediction/ground-truth overlay for one image
    Overlay {
        #[command(flatten)]
        score: ScoreArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Image index within the split
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Directory for the overlay PGM and its JSON sidecar
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_run_json(out_dir: &Path, config: serde_json::Value) -> Result<(), Box<dyn Error>> {
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&config)?)?;
    Ok(())
}

/// Codec matching a loaded checkpoint plus the user's decode flags.
fn codec_for(model_cfg: &ModelConfig, topk: usize, stride: usize) -> Result<CodecConfig, Box<dyn Error>> {
    if model_cfg.stride_out() != stride {
        return Err(format!(
            "--stride {} does not match the checkpoint architecture (stride {})",
            stride,
            model_cfg.stride_out()
        )
        .into());
    }
    Ok(CodecConfig {
        stride,
        num_classes: model_cfg.num_classes,
        top_k: topk,
        peak_threshold: 0.0,
        ..CodecConfig::default()
    })
}

fn build_train_config(common: &CommonTrainArgs, init: Option<&Path>, fresh: bool) -> TrainConfig {
    let base = if fresh {
        TrainConfig::desk(&common.data, &common.out)
    } else {
        TrainConfig::desk_transfer(&common.data, &common.out)
    };
    let mut model = ModelConfig::default();
    if let Some(dc) = &common.down_channels {
        model.down_channels = dc.clone();
    }
    if let Some(uc) = &common.up_channels {
        model.up_channels = uc.clone();
    }
    if let Some(hc) = common.head_channels {
        model.head_channels = hc;
    }
    TrainConfig {
        epochs: common.epochs.unwrap_or(base.epochs),
        eval_every: common.eval_every.unwrap_or(base.eval_every),
        init_checkpoint: init.map(Path::to_path_buf),
        lr: common.lr,
        batch_size: common.batch_size,
        seed: common.seed,
        flip_augment: !common.no_flip,
        model,
        codec: CodecConfig {
            top_k: common.topk,
            stride: common.stride,
            peak_threshold: 0.0,
            ..CodecConfig::default()
        },
        eval: EvalConfig {
            confidence_threshold: common.conf_thr,
            ..EvalConfig::default()
        },
        ..base
    }
}

fn run_training(cfg: &TrainConfig, command: &str) -> Result<(), Box<dyn Error>> {
    write_run_json(
        &cfg.out_dir,
        serde_json::json!({ "command": command, "config": cfg }),
    )?;
    let outcome = train(cfg)?;
    println!(
        "{command}: best epoch {} with val mAP@0.50:0.95 = {:.4} ({} eval points) -> {}",
        outcome.log.best.epoch,
        outcome.log.best.map_50_95,
        outcome.log.points.len(),
        outcome.best_checkpoint.display()
    );
    Ok(())
}

fn dispatch(command: Command) -> Result<(), Box<dyn Error>> {
    match command {
        Command::Synth {
            family,
            out,
            seed,
            preset,
        } => {
            let family: Family = family.into();
            let (cfg, counts) = match preset {
                PresetArg::Desk => {
                    let cfg = match family {
                        Family::Aei => SynthConfig::aei_default(seed),
                        Family::Adi => SynthConfig::adi_default(seed),
                    };
                    (cfg, SynthConfig::desk_counts(family))
                }
                PresetArg::Full => {
                    let cfg = match family {
                        Family::Aei => SynthConfig::aei_default(seed),
                        Family::Adi => SynthConfig::adi_default(seed),
                    };
                    (cfg, SynthConfig::full_counts(family))
                }
                PresetArg::Easy => (SynthConfig::easy_sanity(seed), SynthConfig::easy_sanity_counts()),
            };
            write_run_json(
                &out,
                serde_json::json!({ "command": "synth", "config": cfg, "counts": counts }),
            )?;
            let manifests = generate_dataset(&cfg, &out, counts)?;
            let total: usize = manifests.iter().map(|m| m.entries.len()).sum();
            let boxes: usize = manifests.iter().map(|m| m.num_boxes()).sum();
            println!(
                "synth: {total} images / {boxes} boxes ({}) -> {}",
                cfg.family.as_str(),
                out.display()
            );
            Ok(())
        }
        Command::Train { common, init_ckpt } => {
            let cfg = build_train_config(&common, init_ckpt.as_deref(), true);
            run_training(&cfg, "train")
        }
        Command::Transfer { common, init_ckpt } => {
            let cfg = build_train_config(&common, None, false);
            write_run_json(
                &cfg.out_dir,
                serde_json::json!({
                    "command": "transfer",
                    "config": cfg,
                    "source": init_ckpt,
                }),
            )?;
            let outcome = transfer(&init_ckpt, &cfg)?;
            println!(
                "transfer: best epoch {} with val mAP@0.50:0.95 = {:.4} -> {}",
                outcome.log.best.epoch,
                outcome.log.best.map_50_95,
                outcome.best_checkpoint.display()
            );
            Ok(())
        }
        Command::Eval { score, split, out } => {
            let (model, meta) = DetectorModel::<f32>::from_checkpoint(&score.ckpt)?;
            let codec = codec_for(&meta.model, score.topk, score.stride)?;
            let split: Split = split.into();
            let info = load_dataset_info(&score.data)?;
            let (manifest, dets) = infer_split(&model, &score.data, split, &codec)?;
            let per_image: Vec<_> = dets
                .into_iter()
                .zip(&manifest.entries)
                .map(|(d, e)| (d, e.boxes.clone()))
                .collect();
            let eval_cfg = EvalConfig {
                confidence_threshold: score.conf_thr,
                num_classes: info.classes.len(),
                ..EvalConfig::default()
            };
            let report = evaluate(&per_image, &eval_cfg);
            let csv = report.to_csv(&info.classes);
            println!(
                "eval[{}]: mAP@0.50 = {:.4}, mAP@0.50:0.95 = {:.4} over {} images",
                split.as_str(),
                report.map_50,
                report.map_50_95,
                manifest.entries.len()
            );
            match out {
                Some(dir) => {
                    write_run_json(
                        &dir,
                        serde_json::json!({
                            "command": "eval",
                            "ckpt": score.ckpt,
                            "data": score.data,
                            "split": split.as_str(),
                            "conf_thr": score.conf_thr,
                            "topk": score.topk,
                            "stride": score.stride,
                        }),
                    )?;
                    fs::write(dir.join("eval.csv"), csv)?;
                    fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Infer { score, split, out } => {
            let (model, meta) = DetectorModel::<f32>::from_checkpoint(&score.ckpt)?;
            let codec = codec_for(&meta.model, score.topk, score.stride)?;
            let split: Split = split.into();
            let (manifest, dets) = infer_split(&model, &score.data, split, &codec)?;
            write_run_json(
                &out,
                serde_json::json!({
                    "command": "infer",
                    "ckpt": score.ckpt,
                    "data": score.data,
                    "split": split.as_str(),
                    "conf_thr": score.conf_thr,
                    "topk": score.topk,
                    "stride": score.stride,
                }),
            )?;
            let entries: Vec<(String, Vec<crate::geometry::Detection>)> = manifest
                .entries
                .iter()
                .zip(dets)
                .map(|(e, d)| {
                    (
                        e.image.clone(),
                        d.into_iter().filter(|d| d.score >= score.conf_thr).collect(),
                    )
                })
                .collect();
            let path = out.join("detections.jsonl");
            save_detections(&path, &entries)?;
            let kept: usize = entries.iter().map(|(_, d)| d.len()).sum();
            println!(
                "infer[{}]: {kept} detections >= {:.2} over {} images -> {}",
                split.as_str(),
                score.conf_thr,
                entries.len(),
                path.display()
            );
            Ok(())
        }
        Command::Bench {
            score,
            split,
            warmup,
            n_images,
            repeat,
            out,
        } => {
            let (model, meta) = DetectorModel::<f32>::from_checkpoint(&score.ckpt)?;
            let codec = codec_for(&meta.model, score.topk, score.stride)?;
            let cfg = BenchConfig {
                warmup,
                n_images,
                repeat,
            };
            let report = benchmark(&model, &score.data, split.into(), &codec, &cfg)?;
            print!("{}", report.render_table());
            if let Some(dir) = out {
                write_run_json(
                    &dir,
                    serde_json::json!({
                        "command": "bench",
                        "ckpt": score.ckpt,
                        "data": score.data,
                        "split": Split::from(split).as_str(),
                        "bench": cfg,
                        "topk": score.topk,
                        "stride": score.stride,
                    }),
                )?;
                fs::write(dir.join("bench.json"), serde_json::to_string_pretty(&report)?)?;
            }
            Ok(())
        }
        Command::Overlay {
            score,
            split,
            index,
            out,
        } => {
            let (model, meta) = DetectorModel::<f32>::from_checkpoint(&score.ckpt)?;
            let codec = codec_for(&meta.model, score.topk, score.stride)?;
            let split: Split = split.into();
            let info = load_dataset_info(&score.data)?;
            let manifest = load_manifest(&score.data, split)?;
            let entry = manifest.entries.get(index).ok_or_else(|| {
                format!(
                    "--index {index} out of range: split {} has {} images",
                    split.as_str(),
                    manifest.entries.len()
                )
            })?;
            let image = GrayImage::load_pgm(&manifest.image_path(entry))?;
            let norm = Normalizer::from_info(&info);
            let maps = model.forward(&norm.normalize(&image))?.into_head_maps();
            let dets: Vec<_> = crate::codec::decode_detections(&maps, &codec)
                .into_iter()
                .filter(|d| d.score >= score.conf_thr)
                .collect();
            let pair = overlay::overlay(&image, &dets, &entry.boxes);
            write_run_json(
                &out,
                serde_json::json!({
                    "command": "overlay",
                    "ckpt": score.ckpt,
                    "data": score.data,
                    "split": split.as_str(),
                    "index": index,
                    "conf_thr": score.conf_thr,
                }),
            )?;
            let stem = format!("overlay_{}_{index}", split.as_str());
            let pgm = out.join(format!("{stem}.pgm"));
            pair.save_pgm(&pgm)?;
            let sidecar = serde_json::json!({
                "image": entry.image,
                "split": split.as_str(),
                "index": index,
                "detections": dets,
                "ground_truth": entry.boxes,
            });
            fs::write(
                out.join(format!("{stem}.json")),
                serde_json::to_string_pretty(&sidecar)?,
            )?;
            println!(
                "overlay: {} detections vs {} ground-truth boxes -> {}",
                dets.len(),
                entry.boxes.len(),
                pgm.display()
            );
            Ok(())
        }
    }
}
