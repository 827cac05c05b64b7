use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use weakpoint_core::cloudstore::{load_cloud_auto, save_cloud, CloudFormat};
use weakpoint_core::crf::{crf_refine_auto, scores_from_labels};
use weakpoint_core::mprm::{Fusion, MprmModel};
use weakpoint_core::pipeline::{
    ablate, class_names, evaluate, generate_pseudo_labels, generate_rooms, load_scenes, save_pseudo_labels,
    save_scene, train_classifier, train_segmenter, ClassCounts, EpochLog, LabelLevel, PipelineConfig, PreparedScene,
    Segmenter,
};
use weakpoint_core::weaksup::{build_seed_grid, sample_subclouds, WeakLabelRecord};
use weakpoint_core::{Error, Result};

/// Weakly supervised point-cloud segmentation from cloud-level labels.
#[derive(Parser)]
#[command(name = "weakpoint", version)]
struct Cli {
    /// TOML config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic labelled rooms as TSV clouds.
    GenScenes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Emit one JSON line per seed-grid subcloud with its weak label.
    Weaklabel {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the multi-path classifier on weak labels.
    TrainCls {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_level)]
        level: Option<LabelLevel>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Per-epoch loss log (JSON).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate pseudo labels and score them against ground truth.
    Pcam {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `all` or a comma-separated list of plain, spatial, channel, pointwise.
        #[arg(long)]
        paths: Option<String>,
        #[arg(long, value_parser = parse_fusion)]
        fusion: Option<Fusion>,
        /// Refine with the dense CRF before the argmax.
        #[arg(long)]
        crf: bool,
    },
    /// CRF-refine a pseudo-label TSV.
    Refine {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score given to each point's current label before refinement.
        #[arg(long, default_value_t = 2.0)]
        logit: f64,
    },
    /// Train the segmentation network on pseudo-labelled clouds.
    TrainSeg {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a segmentation checkpoint against labelled clouds.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write predicted clouds here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Pseudo-label mIoU for each path combination.
    Ablate {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        crf: bool,
    },
}

fn parse_level(s: &str) -> Result<LabelLevel> {
    s.parse()
}

fn parse_fusion(s: &str) -> Result<Fusion> {
    s.parse()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

fn names(num_classes: usize) -> Vec<String> {
    let known = class_names();
    (0..num_classes).map(|c| known.get(c).cloned().unwrap_or_else(|| format!("class{c}"))).collect()
}

fn print_epoch(stage: &str) -> impl FnMut(&EpochLog) + '_ {
    move |l| eprintln!("{stage} epoch {:>4}  lr {:.6}  loss {:.5}", l.epoch, l.lr, l.loss)
}

fn classifier(config: &PipelineConfig, checkpoint: &Path) -> Result<MprmModel> {
    let mut model = MprmModel::new(&config.geometry, &config.mprm, config.num_classes, config.seed)?;
    model.load(checkpoint)?;
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::GenScenes { out, count } => {
            let count = count.unwrap_or(config.scenes.count);
            for (id, cloud) in generate_rooms(&config.scenes.room, count, config.seed)? {
                save_scene(&out, &id, &cloud)?;
            }
            println!("wrote {count} scenes to {}", out.display());
        }
        Command::Weaklabel { scenes, out } => {
            let mut lines = String::new();
            for scene in load_scenes(&scenes, &config, true)? {
                let grid = build_seed_grid(&scene.cloud, config.data.radius)?;
                for sample in sample_subclouds(&scene.cloud, &grid, Some(config.num_classes))?.samples {
                    lines.push_str(&serde_json::to_string(&WeakLabelRecord::new(&scene.id, &sample))?);
                    lines.push('\n');
                }
            }
            fs::write(&out, lines).map_err(|e| io_error(&out, e))?;
        }
        Command::TrainCls { scenes, out, level, epochs, log } => {
            if let Some(level) = level {
                config.data.level = level;
            }
            if let Some(e) = epochs {
                config.classifier.epochs = e;
            }
            let scenes = load_scenes(&scenes, &config, true)?;
            let (model, logs) = train_classifier(&scenes, &config, print_epoch("classifier"))?;
            model.save(&out)?;
            if let Some(log) = log {
                write_json(&log, &logs)?;
            }
            println!("saved classifier to {}", out.display());
        }
        Command::Pcam { scenes, checkpoint, out, paths, fusion, crf } => {
            if let Some(p) = paths {
                config.pcam.paths = p;
            }
            if let Some(f) = fusion {
                config.pcam.fusion = f;
            }
            config.pcam.crf |= crf;
            config.validate()?;
            let model = classifier(&config, &checkpoint)?;
            let scenes = load_scenes(&scenes, &config, true)?;
            let (results, report) = generate_pseudo_labels(&model, &scenes, &config)?;
            for (scene, r) in scenes.iter().zip(&results) {
                save_pseudo_labels(&out, scene, &r.labels, config.num_classes)?;
            }
            write_json(&out.join("metrics.json"), &report)?;
            println!("pseudo-label mIoU {:.4}", report.metrics.miou);
        }
        Command::Refine { input, out, logit } => {
            let cloud = load_cloud_auto(&input)?;
            let labels = cloud
                .labels
                .clone()
                .ok_or_else(|| Error::Validation(format!("{} has no label column", input.display())))?;
            let map = scores_from_labels(&labels, config.num_classes, logit)?;
            let grid = build_seed_grid(&cloud, config.data.radius)?;
            let members: Vec<Vec<usize>> = sample_subclouds(&cloud, &grid, None)?
                .samples
                .into_iter()
                .map(|s| s.member_indices)
                .collect();
            let refined = crf_refine_auto(&cloud, &map, &members, &config.crf)?;
            let changed = refined.labels.iter().zip(&labels).filter(|(a, b)| a != b).count();
            let counts = ClassCounts::of(&refined.labels, config.num_classes);
            save_cloud(&out, &cloud.with_labels(refined.labels)?, CloudFormat::XyzrgblTsv)?;
            write_json(&out.with_extension("counts.json"), &counts)?;
            println!("refined {} points, {changed} changed", counts.points);
        }
        Command::TrainSeg { scenes, out, epochs, log } => {
            if let Some(e) = epochs {
                config.segmenter.stage.epochs = e;
            }
            let scenes = load_scenes(&scenes, &config, false)?;
            let (model, logs) = train_segmenter(&scenes, &config, print_epoch("segmenter"))?;
            model.save(&out)?;
            if let Some(log) = log {
                write_json(&log, &logs)?;
            }
            println!("saved segmenter to {}", out.display());
        }
        Command::Eval { scenes, checkpoint, out, predictions } => {
            let mut model = Segmenter::new(&config);
            model.load(&checkpoint)?;
            let scenes: Vec<PreparedScene> = load_scenes(&scenes, &config, true)?;
            let (metrics, preds) = evaluate(&model, &scenes, &config)?;
            if let Some(dir) = predictions {
                for (scene, (_, labels)) in scenes.iter().zip(preds) {
                    save_scene(&dir, &scene.id, &scene.cloud.clone().with_labels(labels)?)?;
                }
            }
            if let Some(out) = out {
                write_json(&out, &metrics)?;
            }
            println!("mIoU {:.4}", metrics.miou);
            for (name, iou) in names(config.num_classes).iter().zip(&metrics.iou) {
                match iou {
                    Some(v) => println!("  {name:<10} {v:.4}"),
                    None => println!("  {name:<10} -"),
                }
            }
        }
        Command::Ablate { scenes, checkpoint, out, crf } => {
            config.pcam.crf |= crf;
            let model = classifier(&config, &checkpoint)?;
            let scenes = load_scenes(&scenes, &config, true)?;
            let report = ablate(&model, &scenes, &config)?;
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            print!("{}", report.table(&names(config.num_classes)));
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
            ExitCode::from(exit_code(&e))
        }
    }
}
